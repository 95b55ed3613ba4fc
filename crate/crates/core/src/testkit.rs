//! Offline corpus for end-to-end runs: scene-graph images compiled from
//! captions, a JSONL dataset, a mock chat fixture bundle and a config.

use std::io;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::harness::{FixtureBundle, QueryFixture};
use crate::imagegen::compile_mock_scene;

pub struct MockQuery {
    pub task: &'static str,
    pub query: &'static str,
    /// Logic-correct program body first, then a right-for-wrong-reason
    /// distractor, then one that errors on some inputs.
    pub bodies: [&'static str; 3],
    pub tests: &'static str,
    /// `(scene caption, gold answer)`.
    pub scenes: [(&'static str, &'static str); 4],
}

pub const MOCK_QUERIES: [MockQuery; 5] = [
    MockQuery {
        task: "vqa",
        query: "Is there a cat?",
        bodies: [
            "return bool_to_yesno(len(ImagePatch(image).find('cat')) > 0)",
            "return 'yes'",
            "return ImagePatch(image).find('cat')[0].simple_query('Is there a cat?')",
        ],
        tests: "1. Image Caption: \"a cat\" Answer: yes\n2. Image Caption: \"a dog\" Answer: no\n\
                3. Image Caption: \"two cats and a chair\" Answer: yes\n4. Image Caption: \"a red car\" Answer: no\n\
                5. Image Caption: \"a white dog near a table\" Answer: no\n\
                6. Image Caption: \"A fluffy kitten sleeping in the sunlight\" Answer: yes",
        scenes: [("a cat near a dog", "yes"), ("two dogs", "no"), ("a black cat on a table", "yes"), ("a red car", "no")],
    },
    MockQuery {
        task: "vqa",
        query: "Are there two dogs?",
        bodies: [
            "return bool_to_yesno(len(ImagePatch(image).find('dog')) == 2)",
            "return bool_to_yesno(len(ImagePatch(image).find('dog')) > 0)",
            "return bool_to_yesno(ImagePatch(image).find('dog')[1].width > 0)",
        ],
        tests: "1. Image Caption: \"two dogs\" Answer: yes\n2. Image Caption: \"a dog\" Answer: no\n\
                3. Image Caption: \"three dogs\" Answer: no\n4. Image Caption: \"a cat\" Answer: no\n\
                5. Image Caption: \"two dogs and a cat\" Answer: yes",
        scenes: [("two dogs near a car", "yes"), ("a dog", "no"), ("two dogs", "yes"), ("a cat", "no")],
    },
    MockQuery {
        task: "vqa",
        query: "Is the car red?",
        bodies: [
            "car_patches = ImagePatch(image).find('car')\n    if len(car_patches) == 0:\n        return 'no'\n    \
             return bool_to_yesno(car_patches[0].verify_property('car', 'red'))",
            "return bool_to_yesno(len(ImagePatch(image).find('car')) > 0)",
            "return bool_to_yesno(ImagePatch(image).find('car')[0].verify_property('car', 'red'))",
        ],
        tests: "1. Image Caption: \"a red car\" Answer: yes\n2. Image Caption: \"a blue car\" Answer: no\n\
                3. Image Caption: \"a white car\" Answer: no\n4. Image Caption: \"a red car and a dog\" Answer: yes\n\
                5. Image Caption: \"a dog\" Answer: no",
        scenes: [("a red car", "yes"), ("a blue car", "no"), ("a red car left of a dog", "yes"), ("a green car", "no")],
    },
    MockQuery {
        task: "itm",
        query: "Verify image matches text=\"a cat to the left of a dog\"",
        bodies: [
            "image_patch = ImagePatch(image)\n    cats = image_patch.find('cat')\n    dogs = image_patch.find('dog')\n    \
             return bool_to_yesno(any(c.horizontal_center < d.horizontal_center for c in cats for d in dogs))",
            "image_patch = ImagePatch(image)\n    \
             return bool_to_yesno(len(image_patch.find('cat')) > 0 and len(image_patch.find('dog')) > 0)",
            "image_patch = ImagePatch(image)\n    \
             return bool_to_yesno(image_patch.find('cat')[0].horizontal_center < image_patch.find('dog')[0].horizontal_center)",
        ],
        tests: "1. Image Caption: \"a cat left of a dog\" Answer: yes\n2. Image Caption: \"a cat right of a dog\" Answer: no\n\
                3. Image Caption: \"a dog\" Answer: no\n4. Image Caption: \"a cat\" Answer: no\n\
                5. Image Caption: \"a dog left of a cat\" Answer: no",
        scenes: [("a cat left of a dog", "yes"), ("a cat right of a dog", "no"), ("a dog", "no"), ("a dog left of a cat", "no")],
    },
    MockQuery {
        task: "vqa",
        query: "How many chairs are there?",
        bodies: [
            "return str(len(ImagePatch(image).find('chair')))",
            "return '2'",
            "return ImagePatch(image).find('chair')[2].simple_query('How many chairs are there?')",
        ],
        tests: "1. Image Caption: \"two chairs\" Answer: 2\n2. Image Caption: \"a chair\" Answer: 1\n\
                3. Image Caption: \"three chairs near a table\" Answer: 3\n4. Image Caption: \"two chairs and a cat\" Answer: 2\n\
                5. Image Caption: \"four chairs\" Answer: 4",
        scenes: [("two chairs", "2"), ("three chairs", "3"), ("a chair near a table", "1"), ("two chairs left of a sofa", "2")],
    },
];

pub fn program_text(body: &str) -> String {
    format!("def execute_command(image):\n    {body}\n")
}

fn fenced(body: &str) -> String {
    format!("```python\n{}```", program_text(body))
}

pub fn mock_bundle() -> FixtureBundle {
    let queries = MOCK_QUERIES
        .iter()
        .map(|q| {
            let fixture = QueryFixture {
                programs: q.bodies.iter().map(|b| fenced(b)).collect(),
                tests: vec![q.tests.to_string()],
                reprompt: vec![fenced(q.bodies[0])],
            };
            (q.query.to_string(), fixture)
        })
        .collect();
    FixtureBundle { queries }
}

pub struct MockCorpus {
    pub dir: PathBuf,
    pub dataset: PathBuf,
    pub fixtures: PathBuf,
    pub config: PathBuf,
}

/// Writes `records` dataset lines (query-major round robin over
/// [`MOCK_QUERIES`] and their scenes) plus fixtures and a config whose
/// cache lives in `dir/cache`.
pub fn write_mock_corpus(dir: &Path, records: usize) -> io::Result<MockCorpus> {
    std::fs::create_dir_all(dir.join("scenes"))?;
    let mut lines = Vec::new();
    for i in 0..records {
        let q = &MOCK_QUERIES[i % MOCK_QUERIES.len()];
        let (caption, gold) = q.scenes[(i / MOCK_QUERIES.len()) % q.scenes.len()];
        let scene = compile_mock_scene(caption).map_err(|e| io::Error::other(e.to_string()))?;
        let rel = format!("scenes/{i:03}.json");
        std::fs::write(dir.join(&rel), scene.to_canonical_json())?;
        let line = json!({ "id": format!("r{i:03}"), "task": q.task, "query": q.query, "image": rel, "gold": gold });
        lines.push(line.to_string());
    }
    let dataset = dir.join("dataset.jsonl");
    std::fs::write(&dataset, lines.join("\n") + "\n")?;
    let fixtures = dir.join("fixtures.json");
    std::fs::write(&fixtures, serde_json::to_string_pretty(&mock_bundle()).expect("bundle serializes"))?;
    let config = dir.join("config.json");
    let cfg = json!({ "tests": 4, "workers": 4, "mock_fixtures": fixtures, "cache_dir": dir.join("cache") });
    std::fs::write(&config, serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
    Ok(MockCorpus { dir: dir.to_path_buf(), dataset, fixtures, config })
}
