//! Acceptance checks, one PASS/FAIL line per criterion. Every expected value
//! comes from an oracle written here, not from the library under test.
//!
//! Tolerances: exact equality everywhere except the re-prompt trace scores
//! and refusal F1, compared at `1e-12`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpt_core::imagegen::{compile_mock_scene, parse_layout, plan_layout};
use vpt_core::llm::{Sampling, ScriptedChat};
use vpt_core::perception::{BBox, ImageHandle, SceneGraph, SceneObject, ScriptedBackend};
use vpt_core::policies::{
    correctness_reward, refusal_f1, run_refusal, run_reprompt, run_selection, stop_rule, training_weight,
    unit_test_reward, Fallback, RefusalConfig, RepromptConfig, RepromptInputs, RepromptIteration,
};
use vpt_core::sampler::{sample, sample_trace, HashEmbedder, SampleSpec, Strategy};
use vpt_core::scoring::{score_test, ScoreConfig, UnitTest};
use vpt_core::templates::{self, Task, TestTemplate};
use vpt_core::testgen::{merge_sequences, CandidateTest};
use vpt_core::text::normalize_answer;
use vpt_core::vpdsl::{run_source, ExecutionOutcome, OutcomeKind, ProgramSource};

const TOL: f64 = 1e-12;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn program(body: &str) -> String {
    format!("def execute_command(image):\n    {body}\n")
}

fn scene_image(w: i64, h: i64, objects: &[Obj]) -> ImageHandle {
    let mut g = SceneGraph::new(w, h);
    for o in objects {
        let [l, lo, r, u] = o.b;
        let mut so = SceneObject::new(o.name, BBox::new(l, lo, r, u));
        if let Some(c) = o.color {
            so = so.with_attribute("color", c);
        }
        g = g.with_object(so);
    }
    ImageHandle::from_scene(g)
}

fn mock_image(caption: &str) -> Result<ImageHandle, String> {
    compile_mock_scene(caption).map(ImageHandle::from_scene).map_err(|e| format!("{caption}: {e}"))
}

fn answer_or_error(o: &ExecutionOutcome) -> Option<String> {
    o.is_answer().then(|| o.answer_text().to_string())
}

// ---------------------------------------------------------------- 1

fn scoring_table() -> Check {
    let cfg = ScoreConfig::default();
    let fail = |k| ExecutionOutcome::failure(k, "diag");
    let ans = ExecutionOutcome::answer;
    let table: [(ExecutionOutcome, &str, f64); 12] = [
        (fail(OutcomeKind::CompileError), "yes", -0.1),
        (fail(OutcomeKind::CompileError), "", -0.1),
        (fail(OutcomeKind::RuntimeError), "yes", -0.1),
        (fail(OutcomeKind::Timeout), "no", -0.1),
        (ans("yes"), "yes", 1.0),
        (ans("Yes."), "yes", 1.0),
        (ans("the cat"), "cat", 1.0),
        (ans("  Red  "), "red", 1.0),
        (ans("blue car"), "a blue car", 1.0),
        (ans("no"), "yes", 0.0),
        (ans("two"), "2", 0.0),
        (ans(""), "yes", 0.0),
    ];
    for (i, (o, expected, want)) in table.iter().enumerate() {
        let got = score_test(o, expected, &cfg);
        ensure(got == *want, || format!("case {i}: got {got}, want {want}"))?;
    }
    Ok("12/12 cases".into())
}

// ---------------------------------------------------------------- 2

#[derive(Clone, Copy)]
struct Obj {
    name: &'static str,
    b: [i64; 4],
    color: Option<&'static str>,
}

const fn ob(name: &'static str, b: [i64; 4]) -> Obj {
    Obj { name, b, color: None }
}

const fn colored(name: &'static str, b: [i64; 4], c: &'static str) -> Obj {
    Obj { name, b, color: Some(c) }
}

struct Scene {
    w: i64,
    h: i64,
    objects: Vec<Obj>,
}

impl Scene {
    fn all(&self, name: &str) -> Vec<[i64; 4]> {
        self.objects.iter().filter(|o| o.name == name).map(|o| o.b).collect()
    }
}

fn hc(b: [i64; 4]) -> f64 {
    (b[0] + b[2]) as f64 / 2.0
}

fn vc(b: [i64; 4]) -> f64 {
    (b[1] + b[3]) as f64 / 2.0
}

fn yn(b: bool) -> Option<String> {
    Some(if b { "yes" } else { "no" }.to_string())
}

fn area(b: [i64; 4]) -> i64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn overlap(a: [i64; 4], b: [i64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0 || h <= 0 {
        return 0.0;
    }
    let i = w * h;
    i as f64 / (area(a) + area(b) - i) as f64
}

/// Direct evaluation of each in-context program's logic. `None` means the
/// program must raise (indexing an empty detection list).
fn oracle(program: usize, s: &Scene) -> Option<String> {
    let any2 = |a: &str, b: &str, f: &dyn Fn([i64; 4], [i64; 4]) -> bool| {
        s.all(a).iter().any(|&x| s.all(b).iter().any(|&y| f(x, y)))
    };
    let mid = s.h as f64 / 2.0;
    match program {
        0 => s.all("vehicle").first().and_then(|&v| yn(vc(v) > mid)),
        1 => yn(!s.all("train").is_empty() || !s.all("fence").is_empty()),
        2 => s.all("pillow").first().map(|&p| if vc(p) > mid { "top" } else { "bottom" }.to_string()),
        3 => {
            let m = *s.all("mirror").first()?;
            let mut left = m[2].clamp(0, s.w);
            if left >= s.w {
                left = s.w - 1;
            }
            let region = [left, 0, s.w, s.h];
            let mut best: Option<(&Obj, f64)> = None;
            for o in &s.objects {
                let v = overlap(o.b, region);
                if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((o, v));
                }
            }
            Some(best.and_then(|(o, _)| o.color).unwrap_or("unknown").to_string())
        }
        4 => {
            let sky = s.all("airplane").iter().any(|&a| vc(a) > s.h as f64 * 0.6);
            yn(sky && any2("bird", "airplane", &|b, a| b[3] <= a[1]))
        }
        5 => {
            let near = |x: [i64; 4], t: [i64; 4]| (hc(x) - hc(t)).abs() < 50.0;
            let above = any2("bird", "tree", &|b, t| b[1] >= t[3] && near(b, t));
            let under = any2("cat", "tree", &|c, t| c[3] <= t[1] && near(c, t));
            yn(above && under)
        }
        6 => {
            let on = any2("apple", "book", &|a, b| a[1] >= b[3] && b[0] as f64 <= hc(a) && hc(a) <= b[2] as f64);
            let beside =
                any2("pen", "book", &|p, b| (hc(p) - hc(b)).abs() < 50.0 && (vc(p) - vc(b)).abs() < 100.0);
            yn(on && beside)
        }
        7 => {
            let riding = any2("man", "bicycle", &|m, b| m[0] <= b[2] && m[2] >= b[0] && m[1] <= b[3] && m[3] >= b[1]);
            let dog = any2("dog", "man", &|d, m| (hc(d) - hc(m)).abs() < 100.0 && (vc(d) - vc(m)).abs() < 50.0);
            yn(riding && dog)
        }
        _ => unreachable!(),
    }
}

fn conformance_scenes() -> Vec<Scene> {
    let s = |w, h, objects: Vec<Obj>| Scene { w, h, objects };
    vec![
        s(512, 512, vec![
            ob("vehicle", [100, 400, 200, 480]),
            ob("pillow", [10, 10, 60, 40]),
            ob("train", [300, 50, 400, 120]),
            ob("mirror", [50, 200, 150, 300]),
            colored("curtain", [300, 150, 450, 400], "blue"),
        ]),
        s(400, 300, vec![
            ob("vehicle", [10, 10, 60, 60]),
            ob("fence", [200, 100, 250, 150]),
            ob("pillow", [100, 200, 150, 280]),
            ob("mirror", [300, 100, 390, 200]),
            colored("curtain", [200, 50, 280, 120], "green"),
        ]),
        s(512, 512, vec![ob("airplane", [200, 400, 300, 450]), ob("bird", [100, 100, 150, 150])]),
        s(512, 512, vec![
            ob("airplane", [200, 100, 300, 150]),
            ob("tree", [200, 150, 300, 300]),
            ob("bird", [220, 350, 260, 380]),
            ob("cat", [230, 50, 270, 100]),
        ]),
        s(512, 512, vec![
            ob("book", [200, 250, 300, 300]),
            ob("apple", [230, 310, 260, 340]),
            ob("pen", [320, 260, 340, 300]),
            ob("mirror", [10, 10, 60, 60]),
            colored("curtain", [100, 100, 200, 200], "red"),
            ob("vase", [70, 300, 500, 500]),
        ]),
        s(512, 512, vec![
            ob("book", [200, 250, 300, 300]),
            ob("apple", [230, 310, 260, 340]),
            ob("pen", [270, 250, 290, 300]),
            ob("vehicle", [0, 206, 50, 306]),
        ]),
        s(512, 512, vec![
            ob("man", [100, 100, 200, 300]),
            ob("bicycle", [90, 50, 210, 200]),
            ob("dog", [180, 150, 240, 230]),
            ob("pillow", [10, 200, 40, 312]),
        ]),
        s(512, 512, vec![
            ob("man", [100, 100, 200, 300]),
            ob("bicycle", [300, 50, 400, 200]),
            ob("dog", [180, 150, 240, 230]),
            ob("vehicle", [20, 10, 80, 60]),
            ob("vehicle", [20, 400, 80, 500]),
            ob("train", [100, 400, 200, 450]),
            ob("fence", [300, 400, 400, 450]),
            ob("mirror", [400, 0, 500, 100]),
            colored("curtain", [505, 0, 512, 512], "white"),
        ]),
    ]
}

fn interpreter_conformance() -> Check {
    let mut programs = templates::example_programs(Task::Vqa);
    programs.extend(templates::example_programs(Task::Itm));
    ensure(programs.len() == 8, || format!("{} in-context programs, want 8", programs.len()))?;
    for (q, p) in &programs {
        vpt_core::vpdsl::parse_str(p).map_err(|e| format!("{q}: {e}"))?;
    }
    let backend = ScriptedBackend::new();
    let scenes = conformance_scenes();
    let mut answers = HashSet::new();
    for (si, s) in scenes.iter().enumerate() {
        let img = scene_image(s.w, s.h, &s.objects);
        for (pi, (q, p)) in programs.iter().enumerate() {
            let got = run_source(p, &img, &backend, 5.0);
            let want = oracle(pi, s);
            ensure(answer_or_error(&got) == want, || format!("scene {si} '{q}': got {got:?}, oracle {want:?}"))?;
            if got.kind == OutcomeKind::RuntimeError {
                answers.insert("<error>".to_string());
            } else {
                ensure(got.is_answer(), || format!("scene {si} '{q}': {got:?}"))?;
                answers.insert(format!("{pi}:{}", got.answer_text()));
            }
        }
    }
    Ok(format!("8 programs x {} scenes, {} distinct outcomes", scenes.len(), answers.len()))
}

// ---------------------------------------------------------------- 3

const NOUNS: [&str; 8] = ["cat", "dog", "car", "chair", "bird", "horse", "cup", "book"];
const COLORS: [&str; 5] = ["red", "blue", "green", "white", "black"];

fn clean_program(rng: &mut ChaCha8Rng) -> String {
    let n = *NOUNS.choose(rng).unwrap();
    let k = rng.random_range(0..4);
    match rng.random_range(0..5) {
        0 => program(&format!("return bool_to_yesno(len(ImagePatch(image).find('{n}')) > {k})")),
        1 => program(&format!("return str(len(ImagePatch(image).find('{n}')) + {k})")),
        2 => program(&format!(
            "image_patch = ImagePatch(image)\n    xs = [p.horizontal_center for p in image_patch.find('{n}')]\n    \
             if len(xs) == 0:\n        return 'none'\n    return str(max(xs) > {k})"
        )),
        3 => program(&format!("total = 0\n    for i in range({k}):\n        total += i\n    return str(total)")),
        _ => program(&format!("words = ['{n}', 'thing']\n    return ' '.join(words[{}:])", k % 2)),
    }
}

fn syntax_broken(rng: &mut ChaCha8Rng) -> String {
    let clean = clean_program(rng);
    match rng.random_range(0..5) {
        0 => clean.replacen("(image):", "(image)", 1),
        1 => clean.replacen("return ", "return (", 1),
        2 => clean.replacen("\n    ", "\n      ", 1),
        3 => clean.replacen("return ", "return == ", 1),
        _ => program("return 'unterminated"),
    }
}

fn runtime_broken(rng: &mut ChaCha8Rng) -> String {
    let n = *NOUNS.choose(rng).unwrap();
    let a = rng.random_range(1..50);
    let big = rng.random_range(20..40);
    match rng.random_range(0..5) {
        0 => program(&format!("x = {a}\n    return str({a} // (x - {a}))")),
        1 => program(&format!("return ImagePatch(image).find('{n}')[{big}].simple_query('What is this?')")),
        2 => program(&format!("return str(int('{n}'))")),
        3 => program(&format!("xs = [{a}, {a}]\n    return str(xs[{big}])")),
        _ => program(&format!("return str(len({a}))")),
    }
}

fn error_classification() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut corpus = Vec::new();
    for _ in 0..10 {
        corpus.push((syntax_broken(&mut rng), OutcomeKind::CompileError));
        corpus.push((runtime_broken(&mut rng), OutcomeKind::RuntimeError));
        corpus.push((clean_program(&mut rng), OutcomeKind::Answer));
    }
    let img = mock_image("two cats near a red car")?;
    let backend = ScriptedBackend::new();
    let mut ok = 0;
    for (src, want) in &corpus {
        let got = run_source(src, &img, &backend, 5.0);
        ensure(got.kind == *want, || format!("{src:?}: got {got:?}, want {want:?}"))?;
        ok += 1;
    }
    Ok(format!("{ok}/30 classified"))
}

// ---------------------------------------------------------------- 4, 5

const WORDS: [&str; 12] =
    ["red", "cat", "sofa", "two", "dogs", "park", "blue", "car", "street", "a", "tree", "bright"];
const ANSWERS: [&str; 6] = ["yes", "no", "red", "2", "left", "cat"];

fn random_pool(rng: &mut ChaCha8Rng, n: usize, answers: &[&str]) -> Vec<CandidateTest> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..5);
            let caption: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect();
            CandidateTest {
                caption: caption.join(" "),
                expected: answers.choose(rng).unwrap().to_string(),
                source_sequence: i % 3,
            }
        })
        .collect()
}

/// Step-by-step transcription of the sampling pseudocode: answers are
/// visited in first-appearance order, T keeps ascending index order, and
/// argmax keeps the first maximal element.
fn algorithm1(texts: &[String], f: &[String], e: &dyn Fn(&str) -> Vec<f64>, k: usize, use_answers: bool) -> Vec<usize> {
    let n = texts.len();
    if n <= k {
        return (0..n).collect();
    }
    let mut t: Vec<usize> = (0..n).collect();
    let mut s: Vec<usize> = Vec::new();
    if use_answers {
        let mut a: Vec<&String> = Vec::new();
        for x in f {
            if !a.contains(&x) {
                a.push(x);
            }
        }
        for ai in a {
            if s.len() == k {
                break;
            }
            let pos = t.iter().position(|&ti| &f[ti] == ai).unwrap();
            s.push(t.remove(pos));
        }
    } else {
        s.push(t.remove(0));
    }
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    while s.len() < k && !t.is_empty() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (pos, &ti) in t.iter().enumerate() {
            let et = e(&texts[ti]);
            let d = s.iter().map(|&si| dist(&et, &e(&texts[si]))).fold(f64::NEG_INFINITY, f64::max);
            if d > best.1 {
                best = (pos, d);
            }
        }
        s.push(t.remove(best.0));
    }
    s
}

fn algorithm_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let embedder = HashEmbedder::new(16).unwrap();
    let e = |t: &str| embedder.embed_one(t);
    let strategies = [Strategy::ByAnswer, Strategy::ByInput, Strategy::AnswerThenInput];
    let mut greedy_steps = 0;
    for trial in 0..50 {
        let n = rng.random_range(1..=8);
        let pool = random_pool(&mut rng, n, &ANSWERS);
        let k = rng.random_range(1..=8);
        let strategy = *strategies.choose(&mut rng).unwrap();
        let texts: Vec<String> = pool.iter().map(|c| c.caption.clone()).collect();
        let answers: Vec<String> = pool.iter().map(|c| c.expected.clone()).collect();
        let want = algorithm1(&texts, &answers, &e, k, strategy != Strategy::ByInput);
        let spec = SampleSpec::new(k, strategy);
        let trace = sample_trace(&pool, &spec, &embedder).map_err(|e| e.to_string())?;
        ensure(trace.indices() == want, || format!("trial {trial} {strategy:?} k={k}: {:?} vs {want:?}", trace.indices()))?;
        let picked = sample(&pool, &spec, &embedder).map_err(|e| e.to_string())?;
        let expect: Vec<CandidateTest> = want.iter().map(|&i| pool[i].clone()).collect();
        ensure(picked == expect, || format!("trial {trial}: sample() disagrees with its trace"))?;
        greedy_steps += trace.steps.iter().filter(|s| s.distance.is_some()).count();
    }
    Ok(format!("50/50 pools identical, {greedy_steps} greedy steps"))
}

fn answer_coverage() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let embedder = HashEmbedder::new(64).unwrap();
    let variants: [&[&str]; 6] =
        [&["yes", "Yes.", "YES"], &["no", "No"], &["red", "Red."], &["2"], &["the cat", "cat"], &["left"]];
    for trial in 0..100 {
        let d = rng.random_range(1..=variants.len());
        let mut chosen: Vec<&[&str]> = variants.to_vec();
        chosen.shuffle(&mut rng);
        chosen.truncate(d);
        let n = rng.random_range(d..=30);
        let mut pool = random_pool(&mut rng, n, &["x"]);
        // every chosen answer appears at least once
        for (i, c) in pool.iter_mut().enumerate() {
            let group = if i < d { chosen[i] } else { *chosen.choose(&mut rng).unwrap() };
            c.expected = group.choose(&mut rng).unwrap().to_string();
        }
        pool.shuffle(&mut rng);
        let distinct: HashSet<String> = pool.iter().map(|c| normalize_answer(&c.expected)).collect();
        let k = rng.random_range(distinct.len()..=distinct.len() + 4);
        let picked = sample(&pool, &SampleSpec::new(k, Strategy::AnswerThenInput), &embedder).map_err(|e| e.to_string())?;
        let covered: HashSet<String> = picked.iter().map(|c| normalize_answer(&c.expected)).collect();
        ensure(covered == distinct, || format!("trial {trial}: covered {covered:?} of {distinct:?}"))?;
        ensure(picked.len() == k.min(n), || format!("trial {trial}: {} selected", picked.len()))?;
    }
    Ok("100/100 trials cover every answer".into())
}

// ---------------------------------------------------------------- 6

struct Family {
    target: String,
    gold: String,
    correct: String,
    distractors: Vec<String>,
    erroring: String,
    /// `(caption, expected)` with expectations from the family's own logic.
    tests: Vec<(String, String)>,
}

const NUMBER_WORDS: [&str; 5] = ["a", "two", "three", "four", "five"];

fn plural(n: &str) -> String {
    format!("{n}s")
}

fn counted(k: usize, n: &str) -> String {
    if k == 1 {
        format!("a {n}")
    } else {
        format!("{} {}", NUMBER_WORDS[k - 1], plural(n))
    }
}

fn make_family(rng: &mut ChaCha8Rng) -> Family {
    let mut nouns = NOUNS.to_vec();
    nouns.shuffle(rng);
    let (n, m, o) = (nouns[0], nouns[1], nouns[2]);
    let mut colors = COLORS.to_vec();
    colors.shuffle(rng);
    let (c, c2) = (colors[0], colors[1]);
    let t = |cap: String, a: &str| (cap, a.to_string());
    let mut f = match rng.random_range(0..4) {
        0 => Family {
            target: format!("a {n} and a {m}"),
            gold: "yes".into(),
            correct: program(&format!("return bool_to_yesno(len(ImagePatch(image).find('{n}')) > 0)")),
            distractors: vec![
                program("return 'yes'"),
                program(&format!("image_patch = ImagePatch(image)\n    return bool_to_yesno(len(image_patch.find('{m}')) > 0)")),
            ],
            erroring: program(&format!("return bool_to_yesno(ImagePatch(image).find('{n}')[0].width > 0)")),
            tests: vec![
                t(format!("a {n}"), "yes"),
                t(format!("a {m}"), "no"),
                t(format!("two {}", plural(n)), "yes"),
                t(format!("a {c} {o}"), "no"),
                t(format!("a {n} left of a {m}"), "yes"),
            ],
        },
        1 => {
            let k = rng.random_range(1..=4);
            let others: Vec<usize> = (1..=5).filter(|&j| j != k).collect();
            let j1 = *others.choose(rng).unwrap();
            Family {
                target: format!("{} near a {m}", counted(k, n)),
                gold: k.to_string(),
                correct: program(&format!("return str(len(ImagePatch(image).find('{n}')))")),
                distractors: vec![
                    program(&format!("return '{k}'")),
                    program(&format!(
                        "image_patch = ImagePatch(image)\n    \
                         return str(len(image_patch.find('{n}')) + len(image_patch.find('{o}')))"
                    )),
                ],
                erroring: program(&format!(
                    "patches = ImagePatch(image).find('{n}')\n    first = patches[0]\n    return str(len(patches))"
                )),
                tests: vec![
                    t(counted(j1, n), &j1.to_string()),
                    t(format!("a {m}"), "0"),
                    t(format!("{} and a {o}", counted(k, n)), &k.to_string()),
                    t(format!("a {c} {o}"), "0"),
                    t(counted(k, n), &k.to_string()),
                ],
            }
        }
        2 => Family {
            target: format!("a {c} {n} near a {m}"),
            gold: "yes".into(),
            correct: program(&format!(
                "patches = ImagePatch(image).find('{n}')\n    if len(patches) == 0:\n        return 'no'\n    \
                 return bool_to_yesno(patches[0].verify_property('{n}', '{c}'))"
            )),
            distractors: vec![
                program("return 'yes'"),
                program(&format!("return bool_to_yesno(len(ImagePatch(image).find('{n}')) > 0)")),
            ],
            erroring: program(&format!(
                "return bool_to_yesno(ImagePatch(image).find('{n}')[0].verify_property('{n}', '{c}'))"
            )),
            tests: vec![
                t(format!("a {c2} {n}"), "no"),
                t(format!("a {m}"), "no"),
                t(format!("a {c} {n} left of a {m}"), "yes"),
                t(format!("a {n}"), "no"),
                t(format!("a {c} {n}"), "yes"),
            ],
        },
        _ => Family {
            target: format!("a {n} to the left of a {m}"),
            gold: "yes".into(),
            correct: program(&format!(
                "image_patch = ImagePatch(image)\n    xs = image_patch.find('{n}')\n    ys = image_patch.find('{m}')\n    \
                 return bool_to_yesno(any(x.horizontal_center < y.horizontal_center for x in xs for y in ys))"
            )),
            distractors: vec![
                program("return 'yes'"),
                program(&format!(
                    "image_patch = ImagePatch(image)\n    \
                     return bool_to_yesno(len(image_patch.find('{n}')) > 0 and len(image_patch.find('{m}')) > 0)"
                )),
            ],
            erroring: program(&format!(
                "image_patch = ImagePatch(image)\n    \
                 return bool_to_yesno(image_patch.find('{n}')[0].horizontal_center < image_patch.find('{m}')[0].horizontal_center)"
            )),
            tests: vec![
                t(format!("a {n} left of a {m}"), "yes"),
                t(format!("a {n} right of a {m}"), "no"),
                t(format!("a {n}"), "no"),
                t(format!("a {m}"), "no"),
                t(format!("a {m} left of a {n}"), "no"),
            ],
        },
    };
    f.tests.shuffle(rng);
    f
}

fn selection_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let backend = ScriptedBackend::new();
    let cfg = ScoreConfig { budget_secs: 5.0, ..ScoreConfig::default() };
    let (mut picked, mut malformed) = (0, Vec::new());
    for fam in 0..100 {
        let f = make_family(&mut rng);
        let target = mock_image(&f.target)?;
        let suite: Vec<UnitTest> =
            f.tests.iter().map(|(cap, exp)| Ok(UnitTest::new(cap, exp, mock_image(cap)?))).collect::<Result<_, String>>()?;
        let run = |src: &str, img: &ImageHandle| run_source(src, img, &backend, 5.0);
        let right_on_target = |src: &str| {
            let o = run(src, &target);
            o.is_answer() && normalize_answer(o.answer_text()) == f.gold
        };
        let wrong_somewhere = |src: &str| {
            suite.iter().any(|t| {
                let o = run(src, t.image.as_ref().unwrap());
                !o.is_answer() || normalize_answer(o.answer_text()) != t.expected
            })
        };
        let errs_somewhere = suite.iter().any(|t| run(&f.erroring, t.image.as_ref().unwrap()).kind == OutcomeKind::RuntimeError);
        let well_formed = right_on_target(&f.correct)
            && f.distractors.iter().all(|d| right_on_target(d) && wrong_somewhere(d))
            && errs_somewhere;
        if !well_formed {
            malformed.push(fam);
            continue;
        }
        let mut texts = f.distractors.clone();
        texts.push(f.erroring.clone());
        texts.push(f.correct.clone());
        texts.shuffle(&mut rng);
        let pool: Vec<ProgramSource> = texts.iter().enumerate().map(|(i, p)| ProgramSource::fixture(p, i)).collect();
        let sel = run_selection(&target, &pool, &suite, &backend, &cfg).map_err(|e| e.to_string())?;
        if sel.best().source.text == f.correct {
            picked += 1;
        }
    }
    ensure(malformed.is_empty(), || format!("generator produced malformed families {malformed:?}"))?;
    ensure(picked >= 90, || format!("logic-correct program chosen in {picked}/100 families"))?;
    Ok(format!("logic-correct program chosen in {picked}/100 families (need >= 90)"))
}

// ---------------------------------------------------------------- 7

fn yes_no_suite(yes: usize, total: usize) -> Result<Vec<UnitTest>, String> {
    let img = mock_image("a cat")?;
    Ok((0..total).map(|i| UnitTest::new(format!("t{i}"), if i < yes { "yes" } else { "no" }, img.clone())).collect())
}

fn refusal_behavior() -> Check {
    let backend = ScriptedBackend::new();
    let score_cfg = ScoreConfig::default();
    let pool = [ProgramSource::fixture(program("return 'yes'"), 0), ProgramSource::fixture(program("return 'no'"), 1)];
    let image = mock_image("a cat")?;
    let mut checked = 0;
    for theta in [0.6, 0.7, 0.8] {
        for yes in 5..=9 {
            // best of 'yes' (yes/10) and 'no' ((10-yes)/10)
            let best = yes as f64 / 10.0;
            let suite = yes_no_suite(yes, 10)?;
            let cfg = RefusalConfig { threshold: theta, fallback: Fallback::VqaModel, itm_threshold: 0.8 };
            let r = run_refusal("Is there a cat?", &image, &pool, &suite, &backend, &score_cfg, &cfg)
                .map_err(|e| e.to_string())?;
            ensure(r.decision.best_score == best, || format!("best {} != {best}", r.decision.best_score))?;
            let want = best < theta;
            ensure(r.decision.refused == want, || format!("theta {theta}, S {best}: refused={}", r.decision.refused))?;
            ensure(r.decision.fallback_answer.is_some() == want, || "fallback answer presence".into())?;
            checked += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bodies = [
        "return 'yes'",
        "return 'no'",
        "return bool_to_yesno(len(ImagePatch(image).find('cat')) > 0)",
        "return bool_to_yesno(len(ImagePatch(image).find('dog')) > 0)",
        "return ImagePatch(image).find('horse')[0].simple_query('What is this?')",
    ];
    let captions = ["a cat", "a dog", "a cat and a dog", "a red car"];
    let thetas: Vec<f64> = (0..=22).map(|i| -0.1 + i as f64 * 0.05).collect();
    let mut refused_sets: Vec<HashSet<usize>> = vec![HashSet::new(); thetas.len()];
    for p in 0..50 {
        let n_prog = rng.random_range(1..=4);
        let pool: Vec<ProgramSource> =
            (0..n_prog).map(|i| ProgramSource::fixture(program(bodies.choose(&mut rng).unwrap()), i)).collect();
        let n_tests = rng.random_range(2..=6);
        let suite: Vec<UnitTest> = (0..n_tests)
            .map(|_| {
                let cap = *captions.choose(&mut rng).unwrap();
                let exp = if rng.random_bool(0.5) { "yes" } else { "no" };
                Ok(UnitTest::new(cap, exp, mock_image(cap)?))
            })
            .collect::<Result<_, String>>()?;
        for (ti, &theta) in thetas.iter().enumerate() {
            let cfg = RefusalConfig { threshold: theta, fallback: Fallback::VqaModel, itm_threshold: 0.8 };
            let r = run_refusal("Is there a cat?", &image, &pool, &suite, &backend, &score_cfg, &cfg)
                .map_err(|e| e.to_string())?;
            ensure(r.decision.refused == (r.decision.best_score < theta), || format!("pool {p}: strict rule"))?;
            if r.decision.refused {
                refused_sets[ti].insert(p);
            }
        }
    }
    for w in refused_sets.windows(2) {
        ensure(w[0].is_subset(&w[1]), || "refusal set shrank as theta grew".into())?;
    }

    // hand arithmetic: F1 = 2TP / (2TP + FP + FN)
    let (t, f) = (true, false);
    let tables: [(&[(bool, bool)], f64); 5] = [
        (&[(t, t), (t, f), (f, t), (f, f)], 2.0 / 4.0),
        (&[(t, t), (t, t), (f, f)], 1.0),
        (&[(f, t), (f, f)], 0.0),
        (&[(t, t), (t, t), (t, f), (f, t), (f, t), (f, t)], 4.0 / 8.0),
        (&[(t, t), (f, t), (f, t)], 2.0 / 4.0),
    ];
    for (i, (table, want)) in tables.iter().enumerate() {
        let got = refusal_f1(table);
        ensure((got - want).abs() < TOL, || format!("F1 table {i}: {got} vs {want}"))?;
    }
    Ok(format!("{checked} threshold cases, 50 pools x {} thetas monotone, 5 F1 tables", thetas.len()))
}

// ---------------------------------------------------------------- 8

fn reward_mapping() -> Check {
    let theta = 0.8;
    let grid = [(-0.1, -0.1), (0.0, 0.0), (0.25, 0.25), (0.5, 0.5), (0.79, 0.79), (0.8, 1.0), (0.81, 1.0), (0.95, 1.0), (1.0, 1.0)];
    for (s, want) in grid {
        let got = unit_test_reward(s, theta);
        ensure(got == want, || format!("unit_test_reward({s}) = {got}, want {want}"))?;
        let w = training_weight(got);
        ensure((0.0..=1.0).contains(&w) && w == want.max(0.0), || format!("weight {w} for {s}"))?;
    }
    let ans = ExecutionOutcome::answer;
    let cases = [
        (ans("Yes."), "yes", 1.0),
        (ans("no"), "yes", 0.0),
        (ans("the cat"), "cat", 1.0),
        (ExecutionOutcome::failure(OutcomeKind::RuntimeError, "IndexError"), "yes", 0.0),
        (ExecutionOutcome::failure(OutcomeKind::CompileError, "SyntaxError"), "", 0.0),
    ];
    for (o, gold, want) in &cases {
        let got = correctness_reward(o, gold);
        ensure(got == *want && training_weight(got) == *want, || format!("correctness {o:?} vs {gold}: {got}"))?;
    }
    let sequences: [(&[f64], Option<usize>); 6] = [
        (&[0.2, 0.3, 0.5, 0.4, 0.6], Some(3)),
        (&[0.5, 0.5, 0.5], None),
        (&[0.9, 0.1], Some(1)),
        (&[0.1, 0.2, 0.3, 0.4], None),
        (&[0.3, 0.3, 0.29], Some(2)),
        (&[0.4], None),
    ];
    for (seq, want) in sequences {
        let fired = (1..=seq.len()).find(|&len| stop_rule(&seq[..len])).map(|len| len - 1);
        ensure(fired == want, || format!("stop_rule on {seq:?}: fired at {fired:?}, want {want:?}"))?;
    }
    Ok("9-point grid, 5 correctness cases, 6 stop sequences".into())
}

// ---------------------------------------------------------------- 9

fn fenced(src: &str) -> String {
    format!("```python\n{src}```")
}

fn reprompt_loop() -> Check {
    let backend = ScriptedBackend::new();
    let score = ScoreConfig::default();
    let sampling = Sampling::default();
    let suite: Vec<UnitTest> = [("a cat", "yes"), ("a dog", "no"), ("two cats", "yes"), ("a red car", "no")]
        .iter()
        .map(|(c, e)| Ok(UnitTest::new(*c, *e, mock_image(c)?)))
        .collect::<Result<_, String>>()?;
    let image = mock_image("a cat near a dog")?;
    let good = program("return bool_to_yesno(len(ImagePatch(image).find('cat')) > 0)");
    let initial = [ProgramSource::fixture(program("return 'yes'"), 0)];
    let cfg = RepromptConfig { threshold: 0.7, max_iterations: 3, programs_per_round: 1 };
    let iter = |iteration, round_best: f64, best_so_far: f64, best_index| RepromptIteration {
        iteration,
        generated: 1,
        round_best: Some(round_best),
        best_so_far,
        best_index,
    };
    let same = |a: &[RepromptIteration], b: &[RepromptIteration]| {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.iteration == y.iteration
                    && x.generated == y.generated
                    && x.best_index == y.best_index
                    && (x.best_so_far - y.best_so_far).abs() < TOL
                    && match (x.round_best, y.round_best) {
                        (Some(p), Some(q)) => (p - q).abs() < TOL,
                        (p, q) => p == q,
                    }
            })
    };

    let llm = ScriptedChat::queued(vec![vec![fenced(&good)], vec![fenced(&good)]]);
    let inputs = RepromptInputs {
        task: Task::Vqa,
        query: "Is there a cat?",
        image: &image,
        suite: &suite,
        backend: &backend,
        llm: &llm,
        sampling: &sampling,
        score: &score,
    };
    let r = run_reprompt(&initial, &inputs, &cfg).map_err(|e| e.to_string())?;
    // 'yes' passes 2 of 4 tests; the repaired program passes all 4
    let want = [iter(1, 1.0, 1.0, 1)];
    ensure(r.initial_best == 0.5, || format!("initial best {}", r.initial_best))?;
    ensure(same(&r.trace, &want), || format!("early-exit trace {:?}", r.trace))?;
    ensure(llm.calls() == 1, || format!("{} LLM calls, want 1", llm.calls()))?;
    ensure(r.best.aggregate >= cfg.threshold && r.outcome.answer_text() == "yes", || format!("{:?}", r.outcome))?;
    let prompt = llm.requests()[0].prompt().to_string();
    ensure(prompt.contains("Test A") && prompt.contains("Test D"), || "feedback blocks missing from prompt".into())?;

    let flat = program("return 'no'");
    let broken = program("return ImagePatch(image).find('horse')[0].simple_query('What is this?')");
    let llm = ScriptedChat::queued(vec![vec![fenced(&flat)], vec![fenced(&broken)], vec![fenced(&flat)]]);
    let inputs = RepromptInputs { llm: &llm, ..inputs };
    let r = run_reprompt(&initial, &inputs, &cfg).map_err(|e| e.to_string())?;
    // 'no' ties at 0.5 and never replaces; the broken program scores -0.1 on every test
    let want = [iter(1, 0.5, 0.5, 0), iter(2, -0.1, 0.5, 0), iter(3, 0.5, 0.5, 0)];
    ensure(same(&r.trace, &want), || format!("non-improving trace {:?}", r.trace))?;
    ensure(r.best.source.text == initial[0].text && r.outcome.answer_text() == "yes", || "best-so-far not kept".into())?;
    ensure(llm.calls() == 3, || format!("{} LLM calls, want 3", llm.calls()))?;
    Ok("early exit after 1 round; 3-round best-so-far trace matches".into())
}

// ---------------------------------------------------------------- 10

fn vpt(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vpt")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("vpt {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn determinism(dir: &Path) -> Check {
    let corpus = vpt_core::testkit::write_mock_corpus(dir, 20).map_err(|e| e.to_string())?;
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let (config, dataset) = (p(&corpus.config), p(&corpus.dataset));
    let base = ["run-select", "--mock", "--config", &config, "--dataset", &dataset];
    let run = |mode: &str, out: &Path| {
        let mut args = base.to_vec();
        let out = p(out);
        args.extend([mode, "--out", &out]);
        vpt(&args)
    };
    let (m0, m1, m2) = (dir.join("record.jsonl"), dir.join("replay1.jsonl"), dir.join("replay2.jsonl"));
    run("--record", &m0)?;
    run("--replay", &m1)?;
    run("--replay", &m2)?;
    let read = |x: &Path| std::fs::read(x).map_err(|e| e.to_string());
    let (a, b) = (read(&m1)?, read(&m2)?);
    ensure(a == b, || "replay manifests differ".into())?;
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    ensure(lines == 22, || format!("{lines} manifest lines, want 22"))?;
    let body = |x: &[u8]| String::from_utf8_lossy(x).lines().skip(1).map(str::to_string).collect::<Vec<_>>();
    ensure(body(&read(&m0)?) == body(&a), || "replay records differ from the recorded run".into())?;
    Ok(format!("{} byte manifests identical", a.len()))
}

// ---------------------------------------------------------------- 11

fn parser_fidelity() -> Check {
    let exemplars = templates::layout_exemplars();
    // object counts read off the prompt by hand
    let counts = [4, 3, 4, 2, 2, 2, 4];
    ensure(exemplars.len() == counts.len(), || format!("{} layout exemplars", exemplars.len()))?;
    for ((caption, output), want) in exemplars.iter().zip(counts) {
        let llm = ScriptedChat::with({
            let output = output.clone();
            move |_| Ok(vec![output.clone()])
        });
        let plan = plan_layout(caption, &llm, &Sampling::default()).map_err(|e| e.to_string())?;
        ensure(plan.objects.len() == want, || format!("{caption}: {} objects", plan.objects.len()))?;
        let rendered: Vec<String> =
            plan.objects.iter().map(|o| format!("('{}', [{}, {}, {}, {}])", o.phrase, o.xywh[0], o.xywh[1], o.xywh[2], o.xywh[3])).collect();
        let mut text = format!("Objects: [{}]\nBackground prompt: {}\n", rendered.join(", "), plan.background_prompt);
        text.push_str(&format!("Negative prompt: {}\n", plan.negative_prompt.as_deref().unwrap_or("None")));
        ensure(parse_layout(&text).as_ref() == Some(&plan), || format!("{caption}: round trip differs"))?;
    }
    let llm = ScriptedChat::with({
        let output = exemplars[0].1.clone();
        move |_| Ok(vec![output.clone()])
    });
    let first = plan_layout(&exemplars[0].0, &llm, &Sampling::default()).map_err(|e| e.to_string())?;
    let o = &first.objects[0];
    ensure(o.phrase == "a green car" && o.xywh == [21, 281, 211, 159], || format!("first object {o:?}"))?;

    let blocks: BTreeMap<String, String> = templates::testgen_exemplars(TestTemplate::Vqa).into_iter().collect();
    let block = blocks.get("Is there a cat or dog in the image?").ok_or("cat/dog exemplar missing")?;
    let tests = merge_sequences(&[block]);
    let answers: Vec<&str> = tests.iter().map(|t| t.expected.as_str()).collect();
    ensure(answers == ["yes", "yes", "yes", "no", "yes", "no"], || format!("answers {answers:?}"))?;
    ensure(tests[0].caption == "A grey tabby cat peacefully napping on a plush sofa", || tests[0].caption.clone())?;
    Ok(format!("{} layouts round-trip; cat/dog block yields 6 candidates", exemplars.len()))
}

// ----------------------------------------------------------------

type Criterion<'a> = (&'a str, Duration, Box<dyn FnOnce() -> Check + 'a>);

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("scoring exactness", Duration::from_secs(1), Box::new(scoring_table)),
        ("interpreter conformance", Duration::from_secs(5), Box::new(interpreter_conformance)),
        ("error classification", Duration::from_secs(10), Box::new(error_classification)),
        ("sampling algorithm equivalence", Duration::from_secs(5), Box::new(algorithm_equivalence)),
        ("answer coverage", Duration::from_secs(5), Box::new(answer_coverage)),
        ("selection soundness", Duration::from_secs(60), Box::new(selection_soundness)),
        ("refusal behavior", Duration::from_secs(5), Box::new(refusal_behavior)),
        ("reward mapping", Duration::from_secs(1), Box::new(reward_mapping)),
        ("re-prompt loop", Duration::from_secs(5), Box::new(reprompt_loop)),
        ("replay determinism", Duration::from_secs(30), Box::new(|| determinism(tmp.path()))),
        ("parser fidelity", Duration::from_secs(1), Box::new(parser_fidelity)),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = result.and_then(|d| {
            if took <= limit {
                Ok(d)
            } else {
                Err(format!("{d}; took {took:.2?}, limit {limit:?}"))
            }
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({took:.2?} / {limit:?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({took:.2?} / {limit:?})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
