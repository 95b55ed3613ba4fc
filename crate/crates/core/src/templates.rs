//! Versioned prompt assets and their renderers.
//!
//! Placeholders are substituted in a single left-to-right pass, so text
//! inserted for one placeholder is never rescanned for another.

use serde::{Deserialize, Serialize};

pub const API: &str = include_str!("../assets/prompts/api.txt");
pub const ITM_EXAMPLES: &str = include_str!("../assets/prompts/itm_examples.txt");
pub const VQA_EXAMPLES: &str = include_str!("../assets/prompts/vqa_examples.txt");
pub const REPROMPT_VQA: &str = include_str!("../assets/prompts/reprompt_vqa.txt");
pub const REPROMPT_ITM: &str = include_str!("../assets/prompts/reprompt_itm.txt");
pub const TESTGEN_VQA: &str = include_str!("../assets/prompts/testgen_vqa.txt");
pub const TESTGEN_ITM: &str = include_str!("../assets/prompts/testgen_itm.txt");
pub const TESTGEN_IMPLEMENTATION: &str = include_str!("../assets/prompts/testgen_implementation.txt");
pub const LAYOUT: &str = include_str!("../assets/prompts/layout.txt");

pub const TESTGEN_SYSTEM_PROMPT: &str =
    "You are a skilled AI assistant specialized in generating test cases for programs that respond to queries about images.";

pub const QUERY: &str = "INSERT_QUERY_HERE";
pub const CONTEXT: &str = "INSERT_CONTEXT_HERE";
pub const PROGRAM: &str = "INSERT_PROGRAM_HERE";
pub const CODE: &str = "INSERT_CODE_HERE";
pub const TEST_OUTPUTS: &str = "INSERT_UNIT_TEST_OUTPUTS_HERE";
pub const PATCH_API: &str = "INSERT_IMAGE_PATCH_API";
pub const PROMPT: &str = "INSERT_PROMPT_HERE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vqa,
    Itm,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Itm => "itm",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vqa" => Ok(Task::Vqa),
            "itm" => Ok(Task::Itm),
            other => Err(format!("unknown task '{other}' (expected vqa or itm)")),
        }
    }
}

/// Test-generation prompt variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestTemplate {
    Vqa,
    Itm,
    Implementation,
}

impl TestTemplate {
    pub fn text(self) -> &'static str {
        match self {
            TestTemplate::Vqa => TESTGEN_VQA,
            TestTemplate::Itm => TESTGEN_ITM,
            TestTemplate::Implementation => TESTGEN_IMPLEMENTATION,
        }
    }
}

/// Replaces each placeholder's first occurrence, scanning the template once.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    let mut done = vec![false; values.len()];
    loop {
        let next = values
            .iter()
            .enumerate()
            .filter(|(i, _)| !done[*i])
            .filter_map(|(i, (ph, _))| rest.find(ph).map(|at| (at, i)))
            .min();
        let Some((at, i)) = next else { break };
        out.push_str(&rest[..at]);
        out.push_str(values[i].1);
        rest = &rest[at + values[i].0.len()..];
        done[i] = true;
    }
    out.push_str(rest);
    out
}

pub fn examples(task: Task) -> &'static str {
    match task {
        Task::Vqa => VQA_EXAMPLES,
        Task::Itm => ITM_EXAMPLES,
    }
}

/// API description plus task-matched in-context programs, ending in
/// `Program:` for the model to complete.
pub fn render_program_prompt(task: Task, query: &str) -> String {
    fill(API, &[(CONTEXT, examples(task).trim_end()), (QUERY, query)])
}

pub fn render_testgen_prompt(template: TestTemplate, query: &str, program: Option<&str>) -> String {
    fill(template.text(), &[(QUERY, query), (PROGRAM, program.unwrap_or("").trim_end())])
}

/// The class and method documentation of the API, without the synthesis
/// instructions and examples that follow it.
pub fn api_reference() -> &'static str {
    let end = API.find("Write a function using Python").unwrap_or(API.len());
    API[..end].trim_end()
}

pub fn render_reprompt(task: Task, query: &str, incorrect_program: &str, test_outputs: &str) -> String {
    let template = match task {
        Task::Vqa => REPROMPT_VQA,
        Task::Itm => REPROMPT_ITM,
    };
    fill(
        template,
        &[
            (PATCH_API, api_reference()),
            (QUERY, query),
            (CODE, incorrect_program.trim_end()),
            (TEST_OUTPUTS, test_outputs.trim_end()),
        ],
    )
}

pub fn render_layout_prompt(caption: &str) -> String {
    fill(LAYOUT, &[(PROMPT, caption)])
}

/// Splits an in-context example file into `(query, program)` pairs.
pub fn example_programs(task: Task) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in examples(task).lines() {
        let header = line.strip_prefix("# Query:").or_else(|| line.strip_prefix("#Query:"));
        match (header, out.last_mut()) {
            (Some(q), _) => out.push((q.trim().to_string(), String::new())),
            (None, Some((_, body))) => {
                body.push_str(line);
                body.push('\n');
            }
            (None, None) => {}
        }
    }
    for (_, body) in &mut out {
        let trimmed = body.trim_end().to_string();
        *body = trimmed + "\n";
    }
    out
}

/// `(query, tests block)` exemplars embedded in a test-generation template.
pub fn testgen_exemplars(template: TestTemplate) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let lines: Vec<&str> = template.text().lines().collect();
    let mut i = 0;
    while i < lines.len() {
        if let Some(q) = lines[i].strip_prefix("Query: ") {
            let start = lines[i + 1..].iter().position(|l| l.trim() == "Tests:").map(|p| i + 2 + p);
            if let Some(start) = start {
                let end = lines[start..].iter().position(|l| l.trim().is_empty()).map_or(lines.len(), |p| start + p);
                if q != QUERY && end > start {
                    out.push((q.to_string(), lines[start..end].join("\n")));
                }
                i = end;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// `(caption, model output)` exemplars from the layout prompt.
pub fn layout_exemplars() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in LAYOUT.lines() {
        if let Some(c) = line.strip_prefix("Caption: ") {
            out.push((c.to_string(), String::new()));
        } else if let Some((_, body)) = out.last_mut() {
            if !line.trim().is_empty() {
                body.push_str(line);
                body.push('\n');
            }
        }
    }
    out.retain(|(c, _)| c != PROMPT);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        let t = "a INSERT_QUERY_HERE b INSERT_CONTEXT_HERE c";
        assert_eq!(fill(t, &[(CONTEXT, "X"), (QUERY, "INSERT_CONTEXT_HERE")]), "a INSERT_CONTEXT_HERE b X c");
    }

    #[test]
    fn program_prompt_resolves_placeholders() {
        let p = render_program_prompt(Task::Vqa, "Is there a cat?");
        assert!(!p.contains(QUERY) && !p.contains(CONTEXT));
        assert!(p.ends_with("Query: Is there a cat?\nProgram:\n"));
        assert!(p.contains("# Query: Is the vehicle in the top of the image?"));
        let p = render_program_prompt(Task::Itm, "Verify image matches text=\"a dog\"");
        assert!(p.contains("#Query: Verify image matches text=\"A man is riding a bicycle"));
    }

    #[test]
    fn reprompt_resolves_placeholders() {
        let p = render_reprompt(Task::Itm, "q", "def execute_command(image):\n    return 'yes'\n", "Test A\n");
        for ph in [PATCH_API, QUERY, CODE, TEST_OUTPUTS] {
            assert!(!p.contains(ph), "{ph} left in prompt");
        }
        assert!(p.starts_with("import math"));
        assert!(p.trim_end().ends_with("Corrected Program:"));
    }

    #[test]
    fn example_program_split() {
        let vqa = example_programs(Task::Vqa);
        let itm = example_programs(Task::Itm);
        assert_eq!((vqa.len(), itm.len()), (4, 4));
        assert!(vqa.iter().chain(&itm).all(|(_, p)| p.starts_with("def execute_command(image)")));
        assert!(itm[3].0.starts_with("Verify image matches text=\"A man is riding a bicycle"));
    }

    #[test]
    fn exemplar_blocks() {
        let ex = testgen_exemplars(TestTemplate::Vqa);
        assert_eq!(ex.len(), 5);
        assert_eq!(ex[0].0, "Is there a cat or dog in the image?");
        assert_eq!(ex[0].1.lines().count(), 6);
        assert_eq!(layout_exemplars().len(), 7);
    }
}
