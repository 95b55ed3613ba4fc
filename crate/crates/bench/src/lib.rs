//! Fixtures shared by the benchmarks.

use vpt_core::imagegen::compile_mock_scene;
use vpt_core::perception::ImageHandle;
use vpt_core::scoring::UnitTest;
use vpt_core::testgen::CandidateTest;
use vpt_core::vpdsl::ProgramSource;

pub const CAPTIONS: [&str; 8] = [
    "a cat left of a dog",
    "two red cars near a table",
    "three chairs",
    "a black cat on a wooden table",
    "a dog right of a cat",
    "a blue car and a green truck",
    "four birds above a tree",
    "a cat with no dog",
];

pub fn program(body: &str) -> String {
    format!("def execute_command(image):\n    {body}\n")
}

/// A spatial program that loops over every detection pair.
pub fn spatial_program() -> String {
    program(
        "image_patch = ImagePatch(image)\n    cats = image_patch.find('cat')\n    dogs = image_patch.find('dog')\n    \
         return bool_to_yesno(any(c.horizontal_center < d.horizontal_center for c in cats for d in dogs))",
    )
}

pub fn image(caption: &str) -> ImageHandle {
    ImageHandle::from_scene(compile_mock_scene(caption).expect("bench captions are in the mock grammar"))
}

pub fn suite() -> Vec<UnitTest> {
    CAPTIONS
        .iter()
        .map(|c| {
            let expected = if c.contains("cat left of a dog") { "yes" } else { "no" };
            UnitTest::new(*c, expected, image(c))
        })
        .collect()
}

pub fn pool() -> Vec<ProgramSource> {
    let bodies = [
        "return 'yes'",
        "return bool_to_yesno(len(ImagePatch(image).find('cat')) > 0)",
        "return ImagePatch(image).find('cat')[0].simple_query('What is this?')",
        "return bool_to_yesno(len(ImagePatch(image).find('dog')) == 1",
    ];
    let mut texts: Vec<String> = bodies.iter().map(|b| program(b)).collect();
    texts.push(spatial_program());
    texts.into_iter().enumerate().map(|(i, t)| ProgramSource::fixture(t, i)).collect()
}

/// `n` candidates with `n / 4` distinct answers and varied captions.
pub fn candidates(n: usize) -> Vec<CandidateTest> {
    (0..n)
        .map(|i| CandidateTest {
            caption: format!("{} number {i}", CAPTIONS[i % CAPTIONS.len()]),
            expected: format!("answer {}", i % (n / 4).max(1)),
            source_sequence: i % 3,
        })
        .collect()
}
