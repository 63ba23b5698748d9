//! Prompt texts sent to the generative backends.

pub const OBJECT_LIST_PROMPT: &str = "List the names of all objects in the scene, do NOT mention the objects that would be considered as background (like sky, sea, ground), each separated by a comma. The name of the object should be short. The format MUST looks like: 'red car, blue car, man in black'. If you cannot identify any object, please write 'None'.";

const MERGE_PROMPT_HEAD: &str = "lists of object names from the same image. Please merge them into one list, removing duplicates.";

pub const REMOVAL_PROMPT: &str = "Remove the object covered with red masks; ONLY remove the object itself.";

pub const DESCRIBE_PROMPT: &str = "Make your best guess of what might be happening in this scene in one sentence. Avoid mentioning objects that do not aid in understanding the context of the scene.";

/// Prefix of every line carrying one candidate list inside the merge prompt.
pub const LIST_LINE_PREFIX: &str = "List ";

pub fn merge_prompt(lists: &[String]) -> String {
    let list_lines: Vec<String> = lists
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{LIST_LINE_PREFIX}{}: {l}", i + 1))
        .collect();
    format!(
        "I have {n} {MERGE_PROMPT_HEAD}\n\n\
         Objects that refer to the same thing should be considered duplicates even if worded slightly differently (e.g., \"man in black\" and \"person in black\" are duplicates).\n\
         Keep the most descriptive version when there are duplicates. If the object name contains two entries (e.g., \"man with umbrella\"), split them into two separate objects (\"man with umbrella\" and \"umbrella\").\n\n\
         {lines}\n\n\
         Please return the merged list as a comma-separated string in the same format as the input. For example: 'red car, blue car, man in black'.\n\
         If all lists contain \"None\" or no valid objects, return \"None\". You should ONLY return the list of object names, NO other text.",
        n = lists.len(),
        lines = list_lines.join("\n"),
    )
}

pub fn is_merge_prompt(prompt: &str) -> bool {
    prompt.starts_with("I have ") && prompt.contains(MERGE_PROMPT_HEAD)
}

/// Extracts the candidate lists embedded in a merge prompt.
pub fn merge_prompt_lists(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix(LIST_LINE_PREFIX)?;
            let (idx, list) = rest.split_once(':')?;
            idx.trim().parse::<usize>().ok()?;
            Some(list.trim().to_string())
        })
        .collect()
}

/// Reduces a reasoning model's output to its final answer: drops
/// `<think>...</think>` blocks and trims surrounding whitespace and quotes.
pub fn final_description(raw: &str) -> String {
    let mut text = raw.to_string();
    while let Some(start) = text.find("<think>") {
        match text[start..].find("</think>") {
            Some(end) => text.replace_range(start..start + end + "</think>".len(), ""),
            None => text.truncate(start),
        }
    }
    text.trim().trim_matches('"').trim().to_string()
}
