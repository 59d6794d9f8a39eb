//! A small, quote-aware lexer for POSIX-ish command lines.
//!
//! It is not a shell: it splits a command line into simple commands joined by
//! control operators and pulls out redirections, which is what the simulator
//! and the read-only filter need.

/// Control operator that precedes a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Joiner {
    And,
    Or,
    Seq,
    Pipe,
    Background,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Redirect {
    pub fd: Option<u32>,
    /// `>`, `>>`, `<`, `>&`, `<&`
    pub op: String,
    pub target: String,
}

impl Redirect {
    pub fn is_write(&self) -> bool {
        self.op == ">" || self.op == ">>"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segment {
    pub joiner: Option<Joiner>,
    pub words: Vec<String>,
    pub redirects: Vec<Redirect>,
}

impl Segment {
    pub fn program(&self) -> Option<&str> {
        self.words.first().map(String::as_str)
    }
}

enum Tok {
    Word(String),
    Op(Joiner),
    Redir(Option<u32>, String),
}

fn lex(input: &str) -> Vec<Tok> {
    let chars: Vec<char> = input.chars().collect();
    let mut toks = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    let mut i = 0;
    let flush = |cur: &mut String, in_word: &mut bool, toks: &mut Vec<Tok>| {
        if *in_word {
            toks.push(Tok::Word(std::mem::take(cur)));
            *in_word = false;
        }
    };
    while i < chars.len() {
        let c = chars[i];
        match c {
            '\'' => {
                in_word = true;
                i += 1;
                while i < chars.len() && chars[i] != '\'' {
                    cur.push(chars[i]);
                    i += 1;
                }
            }
            '"' => {
                in_word = true;
                i += 1;
                while i < chars.len() && chars[i] != '"' {
                    if chars[i] == '\\' && i + 1 < chars.len() && "\"\\$`".contains(chars[i + 1]) {
                        i += 1;
                    }
                    cur.push(chars[i]);
                    i += 1;
                }
            }
            '\\' => {
                in_word = true;
                if i + 1 < chars.len() {
                    i += 1;
                    if chars[i] != '\n' {
                        cur.push(chars[i]);
                    }
                }
            }
            '$' if chars.get(i + 1) == Some(&'(') => {
                // keep command substitutions intact inside the word
                in_word = true;
                let mut depth = 0;
                while i < chars.len() {
                    cur.push(chars[i]);
                    if chars[i] == '(' {
                        depth += 1;
                    } else if chars[i] == ')' {
                        depth -= 1;
                        if depth == 0 {
                            break;
                        }
                    }
                    i += 1;
                }
            }
            ' ' | '\t' => flush(&mut cur, &mut in_word, &mut toks),
            '\n' | ';' => {
                flush(&mut cur, &mut in_word, &mut toks);
                toks.push(Tok::Op(Joiner::Seq));
            }
            '&' => {
                flush(&mut cur, &mut in_word, &mut toks);
                if chars.get(i + 1) == Some(&'&') {
                    i += 1;
                    toks.push(Tok::Op(Joiner::And));
                } else {
                    toks.push(Tok::Op(Joiner::Background));
                }
            }
            '|' => {
                flush(&mut cur, &mut in_word, &mut toks);
                if chars.get(i + 1) == Some(&'|') {
                    i += 1;
                    toks.push(Tok::Op(Joiner::Or));
                } else {
                    toks.push(Tok::Op(Joiner::Pipe));
                }
            }
            '>' | '<' => {
                let fd = if in_word && !cur.is_empty() && cur.chars().all(|d| d.is_ascii_digit()) {
                    let fd = cur.parse().ok();
                    cur.clear();
                    in_word = false;
                    fd
                } else {
                    flush(&mut cur, &mut in_word, &mut toks);
                    None
                };
                let mut op = c.to_string();
                if c == '>' && chars.get(i + 1) == Some(&'>') {
                    op.push('>');
                    i += 1;
                } else if chars.get(i + 1) == Some(&'&') {
                    op.push('&');
                    i += 1;
                }
                toks.push(Tok::Redir(fd, op));
            }
            _ => {
                in_word = true;
                cur.push(c);
            }
        }
        i += 1;
    }
    flush(&mut cur, &mut in_word, &mut toks);
    toks
}

/// Splits `input` into simple commands.
pub fn parse(input: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut seg = Segment::default();
    let mut toks = lex(input).into_iter().peekable();
    while let Some(tok) = toks.next() {
        match tok {
            Tok::Word(w) => seg.words.push(w),
            Tok::Redir(fd, op) => {
                let target = match toks.peek() {
                    Some(Tok::Word(_)) => match toks.next() {
                        Some(Tok::Word(w)) => w,
                        _ => unreachable!(),
                    },
                    _ => String::new(),
                };
                seg.redirects.push(Redirect { fd, op, target });
            }
            Tok::Op(j) => {
                if !seg.words.is_empty() || !seg.redirects.is_empty() {
                    segments.push(std::mem::take(&mut seg));
                }
                seg.joiner = Some(j);
            }
        }
    }
    if !seg.words.is_empty() || !seg.redirects.is_empty() {
        segments.push(seg);
    }
    segments
}

/// Inner command texts of `$(...)` and backtick substitutions.
pub fn substitutions(input: &str) -> Vec<String> {
    let mut out = Vec::new();
    let chars: Vec<char> = input.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '$' && chars.get(i + 1) == Some(&'(') {
            let mut depth = 0;
            let start = i + 2;
            let mut j = i + 1;
            while j < chars.len() {
                if chars[j] == '(' {
                    depth += 1;
                } else if chars[j] == ')' {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                }
                j += 1;
            }
            out.push(chars[start..j.min(chars.len())].iter().collect());
            i = j;
        } else if chars[i] == '`' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && chars[j] != '`' {
                j += 1;
            }
            out.push(chars[start..j].iter().collect());
            i = j;
        }
        i += 1;
    }
    out
}

/// Lexically normalizes `path` against `cwd`, resolving `.` and `..`.
pub fn resolve_path(cwd: &str, path: &str) -> String {
    let joined = if path.starts_with('/') {
        path.to_string()
    } else {
        format!("{}/{}", cwd.trim_end_matches('/'), path)
    };
    let mut parts: Vec<&str> = Vec::new();
    for p in joined.split('/') {
        match p {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            other => parts.push(other),
        }
    }
    format!("/{}", parts.join("/"))
}

/// Whether an absolute, normalized path lies in the scratch area.
pub fn is_scratch_path(path: &str) -> bool {
    path == "/tmp" || path.starts_with("/tmp/")
}
