//! Line-oriented tokenizer for the IR subset.

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Tok {
    /// `%name`
    Local(String),
    /// `@name`
    Global(String),
    /// `#0` attribute group reference.
    AttrRef(String),
    /// `!name` metadata reference.
    Meta(String),
    Int(i64),
    Word(String),
    /// `c"..."` or `"..."`; contents are kept raw.
    Str(String),
    Punct(char),
    Ellipsis,
}

#[derive(Debug, Clone)]
pub(crate) struct Spanned {
    pub tok: Tok,
    /// 1-based column of the first character.
    pub col: usize,
}

#[derive(Debug)]
pub(crate) struct LexError {
    pub col: usize,
    pub message: String,
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '-')
}

/// Tokenizes one line. Comments (`;` to end of line) are dropped.
pub(crate) fn lex_line(line: &str) -> Result<Vec<Spanned>, LexError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == ';' {
            break;
        }
        match c {
            '%' | '@' | '#' | '!' => {
                let start = i + 1;
                let mut j = start;
                if j < chars.len() && chars[j] == '"' {
                    return Err(LexError {
                        col,
                        message: "quoted identifiers are not supported".into(),
                    });
                }
                while j < chars.len() && is_ident_char(chars[j]) {
                    j += 1;
                }
                if j == start {
                    if c == '!' && j < chars.len() && chars[j] == '{' {
                        // inline metadata node: `!{...}`; treat as a word
                        out.push(Spanned {
                            tok: Tok::Meta(String::new()),
                            col,
                        });
                        i = j;
                        continue;
                    }
                    return Err(LexError {
                        col,
                        message: format!("expected identifier after '{c}'"),
                    });
                }
                let name: String = chars[start..j].iter().collect();
                let tok = match c {
                    '%' => Tok::Local(format!("%{name}")),
                    '@' => Tok::Global(format!("@{name}")),
                    '#' => Tok::AttrRef(name),
                    _ => Tok::Meta(name),
                };
                out.push(Spanned { tok, col });
                i = j;
            }
            '"' => {
                let (s, next) = lex_string(&chars, i)?;
                out.push(Spanned {
                    tok: Tok::Str(s),
                    col,
                });
                i = next;
            }
            'c' if i + 1 < chars.len() && chars[i + 1] == '"' => {
                let (s, next) = lex_string(&chars, i + 1)?;
                out.push(Spanned {
                    tok: Tok::Str(s),
                    col,
                });
                i = next;
            }
            '.' if chars[i..].starts_with(&['.', '.', '.']) => {
                out.push(Spanned {
                    tok: Tok::Ellipsis,
                    col,
                });
                i += 3;
            }
            '-' | '0'..='9' => {
                let start = i;
                let mut j = i + 1;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
                let text: String = chars[start..j].iter().collect();
                if text == "-" {
                    return Err(LexError {
                        col,
                        message: "stray '-'".into(),
                    });
                }
                let value = text.parse::<i64>().map_err(|_| LexError {
                    col,
                    message: format!("integer literal '{text}' out of range"),
                })?;
                out.push(Spanned {
                    tok: Tok::Int(value),
                    col,
                });
                i = j;
            }
            '=' | ',' | '(' | ')' | '[' | ']' | '{' | '}' | '*' | ':' | '<' | '>' => {
                out.push(Spanned {
                    tok: Tok::Punct(c),
                    col,
                });
                i += 1;
            }
            c if c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$' => {
                let start = i;
                let mut j = i;
                while j < chars.len() && is_ident_char(chars[j]) {
                    j += 1;
                }
                out.push(Spanned {
                    tok: Tok::Word(chars[start..j].iter().collect()),
                    col,
                });
                i = j;
            }
            other => {
                return Err(LexError {
                    col,
                    message: format!("unexpected character '{other}'"),
                })
            }
        }
    }
    Ok(out)
}

fn lex_string(chars: &[char], open: usize) -> Result<(String, usize), LexError> {
    let mut j = open + 1;
    while j < chars.len() && chars[j] != '"' {
        j += 1;
    }
    if j >= chars.len() {
        return Err(LexError {
            col: open + 1,
            message: "unterminated string literal".into(),
        });
    }
    Ok((chars[open + 1..j].iter().collect(), j + 1))
}
