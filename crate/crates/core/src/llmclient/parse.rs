use crate::pairing::Verdict;

/// Lowercases and replaces punctuation with spaces.
fn tokens(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn choice(tokens: &[String], labels: &[&str]) -> Verdict {
    let mut first = false;
    let mut second = false;
    for w in tokens.windows(2) {
        if labels.contains(&w[0].as_str()) {
            match w[1].as_str() {
                "1" | "one" => first = true,
                "2" | "two" => second = true,
                _ => {}
            }
        }
    }
    match (first, second) {
        (true, false) => Verdict::First,
        (false, true) => Verdict::Second,
        _ => Verdict::Invalid,
    }
}

/// Labels accepted as the unit noun. `paper` synonyms are optional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    pub paper_synonyms: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { paper_synonyms: true }
    }
}

impl ParseOptions {
    fn labels(&self) -> Vec<&'static str> {
        if self.paper_synonyms {
            vec!["observation", "paper"]
        } else {
            vec!["observation"]
        }
    }
}

/// Case- and punctuation-tolerant match of a single choice. A response
/// naming both or neither is Invalid.
pub fn parse_single(raw: &str, options: ParseOptions) -> Verdict {
    choice(&tokens(raw), &options.labels())
}

/// Parses `"<n>: Paper 1"` lines (the quality name may stand in for `<n>`).
/// Qualities without a matching line are Invalid individually.
pub fn parse_multi(raw: &str, qualities: &[String], options: ParseOptions) -> Vec<Verdict> {
    let labels = options.labels();
    let mut out = vec![Verdict::Invalid; qualities.len()];
    let mut seen = vec![false; qualities.len()];
    let lowered: Vec<String> = qualities.iter().map(|q| q.to_lowercase()).collect();
    for line in raw.lines() {
        let Some((head, answer)) = line.split_once([':', '-', '=']) else {
            continue;
        };
        let head = head.trim().trim_start_matches(['*', '#', ' ']).trim().to_lowercase();
        let head = head.trim_end_matches(['.', ')']);
        let k = match head.parse::<usize>() {
            Ok(n) if n >= 1 && n <= qualities.len() => n - 1,
            Ok(_) => continue,
            Err(_) => match lowered.iter().position(|q| q == head) {
                Some(k) => k,
                None => continue,
            },
        };
        let verdict = choice(&tokens(answer), &labels);
        // A quality answered twice with different choices is ambiguous.
        out[k] = if seen[k] && out[k] != verdict { Verdict::Invalid } else { verdict };
        seen[k] = true;
    }
    out
}
