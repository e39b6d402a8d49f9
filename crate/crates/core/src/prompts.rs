//! Prompt templates for every model-facing stage.

use std::fmt::Write;

const EXTRACTION_INSTRUCTIONS: &str = "\
Read the story excerpt and list its named entities and the relationships between them, following the format of the example.
Under \"Named entities:\", write one line per character; when several names refer to the same character, put them on the same line separated by \" / \".
Under \"Knowledge graph edges:\", write numbered lines of the form \"subject; predicate; object\". Several subjects or objects may be separated by commas. For a state of a character with no object, write \"subject; predicate\".";

const EXTRACTION_EXAMPLE: &str = "\
[Begin story excerpt]
\"Christmas won't be Christmas without any presents,\" grumbled Jo. \"It's so dreadful to be poor!\" sighed Meg, looking out the window at the snow-covered streets of Concord. \"I don't think it's fair...\"
...
\"Glad to find you so merry, my girls,\" said a cheery voice at the door... \"A letter! A letter! Three cheers for Father!\"
[End story excerpt]

Named entities:
Jo / Jo March
Meg / Margaret / Margaret March
Amy
Beth / Elizabeth
March sisters
Mrs. March / Marmee / Mother
Father
Concord
Union Army

Knowledge graph edges:
1. Jo, Meg, Amy, Beth; in; March sisters
2. March sisters; daughters of; Mrs. March, Father
3. Mrs. March; mother of; March sisters
...
15. Mrs. March; brought home a letter from; Father";

/// Named-entity and knowledge-graph-edge extraction for one scene.
pub fn knowledge_extraction(scene: &str) -> String {
    format!(
        "{EXTRACTION_INSTRUCTIONS}\n\n{EXTRACTION_EXAMPLE}\n\n[Begin story excerpt]\n{scene}\n[End story excerpt]\n"
    )
}

pub fn chunk_summary(chunk: &str) -> String {
    format!(
        "This is a part of a script from a Movie. Read the following content carefully, then answer my question:\n\
{chunk}\n\
The script has ended now.\n\n\
Summary instructions:\n\
- Provide a detailed summary of the key characters' actions, emotions, and situations as reflected in the dialogue or context.\n\
- Clearly state the outcome of the events.\n\
- The summary should be between 2 to 5 sentences long.\n"
    )
}

pub fn atomic_facts(sentence: &str) -> String {
    format!(
        "I will give you a summary from a chunk of movie script.\n\
Your task is to provide me with a list of atomic facts expressed in the given summary.\n\
Each atomic fact should be described in a name-only third-person format.\n\
Please separate each atomic fact with a `\\n`.\n\
Summary: {sentence}\n"
    )
}

/// Fact check against a scene and, when present, a linearized subgraph.
pub fn fact_check(scene: &str, subgraph: Option<&str>, statement: &str) -> String {
    match subgraph {
        Some(graph) => format!(
            "Consider the given statement, the related scene, and the relationship subgraph.\n\
Indicate whether the statement is supported by the scene and the relationship subgraph.\n\
Negation of a false statement should be considered supported.\n\
If the statement is true, output 1.\n\
If the statement is false, output the reason why it is false.\n\
Scene: {scene}\n\
Relationship Subgraph: {graph}\n\
Statement: {statement}\n\
Output:\n"
        ),
        None => format!(
            "Consider the given statement and the related scene.\n\
Indicate whether the statement is supported by the scene.\n\
Negation of a false statement should be considered supported.\n\
If the statement is true, output 1.\n\
If the statement is false, output the reason why it is false.\n\
Scene: {scene}\n\
Statement: {statement}\n\
Output:\n"
        ),
    }
}

pub fn refinement(script: &str, summary: &str, flagged: &[(String, String)]) -> String {
    let mut out = format!(
        "Below is a part of the script from the titled movie.\n\
- Script: {script}\n\
Based on the 'Statement to Revise' and 'Reason for Revision', create a 'Revised Summary' of the 'Summary of the Script'.\n\
Keep the revised summary concise and similar in length to the original summary.\n\
Do not directly copy any part of the 'Script.'\n\
If the 'Summary of the Script' is accurate, generate the original summary as is.\n\
- Summary of the Script: {summary}\n"
    );
    for (i, (fact, reason)) in flagged.iter().enumerate() {
        let _ = writeln!(
            out,
            "- Statement to Revise {}: {fact} (Reason for Revision: {reason})",
            i + 1
        );
    }
    out.push_str("- Revised Summary:\n");
    out
}

pub fn factual_perturbation(sentence: &str) -> String {
    format!(
        "This sentence serves as a summary of a script. Rewrite this one-sentence summary by minimally replacing a few words in the original sentence to render it factually inaccurate, while keeping the original sentence structure intact.\n\n\
Original sentence: {sentence}\n\
Rewritten sentence:"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refinement_numbers_statements() {
        let p = refinement(
            "SCRIPT",
            "SUMMARY",
            &[("a".into(), "r1".into()), ("b".into(), "r2".into())],
        );
        assert!(p.contains("- Statement to Revise 1: a (Reason for Revision: r1)"));
        assert!(p.contains("- Statement to Revise 2: b (Reason for Revision: r2)"));
        assert!(p.trim_end().ends_with("- Revised Summary:"));
    }

    #[test]
    fn fact_check_without_graph_omits_subgraph() {
        assert!(!fact_check("s", None, "x").contains("Relationship Subgraph"));
        assert!(fact_check("s", Some("g"), "x").contains("Relationship Subgraph: g"));
    }
}
