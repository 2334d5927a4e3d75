use super::{ErrorCode, SourceError};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Word(String),
    Str(String),
    /// Raw decimal literal text.
    Number(String),
    Sym(&'static str),
    Eof,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("`{w}`"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Number(n) => format!("number {n}"),
            Tok::Sym(s) => format!("`{s}`"),
            Tok::Eof => "end of input".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub line: usize,
    pub column: usize,
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    column: usize,
    // position of the last consumed character, used for end-of-input errors
    last: (usize, usize),
}

impl<'a> Cursor<'a> {
    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        self.last = (self.line, self.column);
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }
}

const SYMBOLS: [&str; 13] = [
    "->", "<=", ">=", "{", "}", "(", ")", ";", ":", ",", "=", ".", "-",
];

pub(crate) fn tokenize(source: &str) -> Result<Vec<Token>, SourceError> {
    let mut cur = Cursor {
        chars: source.chars().peekable(),
        line: 1,
        column: 1,
        last: (1, 1),
    };
    let mut out = Vec::new();
    loop {
        while let Some(c) = cur.peek() {
            if c.is_whitespace() {
                cur.bump();
            } else if c == '#' {
                while cur.peek().is_some_and(|c| c != '\n') {
                    cur.bump();
                }
            } else {
                break;
            }
        }
        let (line, column) = (cur.line, cur.column);
        let Some(c) = cur.peek() else {
            // end-of-input is reported at the line/column just after the last character
            out.push(Token {
                tok: Tok::Eof,
                line,
                column,
            });
            return Ok(out);
        };
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            let mut w = String::new();
            while let Some(c) = cur.peek().filter(|c| c.is_ascii_alphanumeric() || *c == '_') {
                w.push(c);
                cur.bump();
            }
            Tok::Word(w)
        } else if c.is_ascii_digit() {
            Tok::Number(lex_number(&mut cur, String::new(), line, column)?)
        } else if c == '"' {
            cur.bump();
            Tok::Str(lex_string(&mut cur, line, column)?)
        } else {
            cur.bump();
            let next = cur.peek();
            match (c, next) {
                ('-', Some('>')) => {
                    cur.bump();
                    Tok::Sym("->")
                }
                ('-', Some(d)) if d.is_ascii_digit() => {
                    Tok::Number(lex_number(&mut cur, "-".to_string(), line, column)?)
                }
                ('<', Some('=')) => {
                    cur.bump();
                    Tok::Sym("<=")
                }
                ('>', Some('=')) => {
                    cur.bump();
                    Tok::Sym(">=")
                }
                _ => match SYMBOLS.iter().find(|s| s.len() == 1 && s.starts_with(c)) {
                    Some(s) => Tok::Sym(s),
                    None => {
                        return Err(SourceError::new(
                            line,
                            column,
                            ErrorCode::InvalidCharacter,
                            format!("unexpected character {c:?}"),
                        ))
                    }
                },
            }
        };
        out.push(Token { tok, line, column });
    }
}

fn lex_number(
    cur: &mut Cursor<'_>,
    mut text: String,
    line: usize,
    column: usize,
) -> Result<String, SourceError> {
    while let Some(d) = cur.peek().filter(char::is_ascii_digit) {
        text.push(d);
        cur.bump();
    }
    // a fractional part needs a digit after the dot; `a.b` style paths never
    // start with a digit so there is no ambiguity
    let mut probe = cur.chars.clone();
    if probe.next() == Some('.') && probe.next().is_some_and(|c| c.is_ascii_digit()) {
        text.push('.');
        cur.bump();
        while let Some(d) = cur.peek().filter(char::is_ascii_digit) {
            text.push(d);
            cur.bump();
        }
    }
    if cur.peek().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
        return Err(SourceError::new(
            line,
            column,
            ErrorCode::InvalidNumber,
            format!("malformed number starting with `{text}`"),
        ));
    }
    Ok(text)
}

fn lex_string(cur: &mut Cursor<'_>, line: usize, column: usize) -> Result<String, SourceError> {
    let mut s = String::new();
    loop {
        match cur.bump() {
            None => {
                return Err(SourceError::new(
                    line,
                    column,
                    ErrorCode::UnterminatedString,
                    "string literal is not terminated",
                ))
            }
            Some('"') => return Ok(s),
            Some('\\') => {
                let (l, c) = cur.last;
                let esc = match cur.bump() {
                    Some('"') => '"',
                    Some('\\') => '\\',
                    Some('n') => '\n',
                    Some('t') => '\t',
                    Some('r') => '\r',
                    other => {
                        return Err(SourceError::new(
                            l,
                            c,
                            ErrorCode::InvalidEscape,
                            format!("unknown escape sequence {other:?}"),
                        ))
                    }
                };
                s.push(esc);
            }
            Some(c) => s.push(c),
        }
    }
}
