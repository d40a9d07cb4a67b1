//! Tokenizer for the workflow script language.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Keyword,
    Ident,
    Str,
    Int,
    Float,
    Punct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    /// For `Str` this is the unescaped content, without quotes.
    pub text: String,
    pub line: u32,
    pub col: u32,
}

pub const KEYWORDS: &[&str] = &["type", "app", "foreach", "if", "else", "in", "true", "false"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexError {
    pub message: String,
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for LexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lex error: {} at {}:{}", self.message, self.line, self.col)
    }
}

impl std::error::Error for LexError {}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn peek2(&self) -> Option<u8> {
        self.src.get(self.pos + 1).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn error(&self, message: impl Into<String>) -> LexError {
        LexError { message: message.into(), line: self.line, col: self.col }
    }

    fn skip_trivia(&mut self) -> Result<(), LexError> {
        loop {
            match self.peek() {
                Some(c) if (c as char).is_whitespace() => {
                    self.bump();
                }
                Some(b'/') if self.peek2() == Some(b'/') => {
                    while let Some(c) = self.peek() {
                        if c == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                Some(b'/') if self.peek2() == Some(b'*') => {
                    let (line, col) = (self.line, self.col);
                    self.bump();
                    self.bump();
                    loop {
                        match self.peek() {
                            Some(b'*') if self.peek2() == Some(b'/') => {
                                self.bump();
                                self.bump();
                                break;
                            }
                            Some(_) => {
                                self.bump();
                            }
                            None => {
                                return Err(LexError {
                                    message: "unterminated block comment".into(),
                                    line,
                                    col,
                                })
                            }
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn string(&mut self) -> Result<Token, LexError> {
        let (line, col) = (self.line, self.col);
        self.bump();
        let mut text = String::new();
        loop {
            match self.bump() {
                None | Some(b'\n') => {
                    return Err(LexError { message: "unterminated string".into(), line, col })
                }
                Some(b'"') => break,
                Some(b'\\') => match self.bump() {
                    Some(b'"') => text.push('"'),
                    Some(b'\\') => text.push('\\'),
                    Some(b'n') => text.push('\n'),
                    Some(b't') => text.push('\t'),
                    other => {
                        return Err(LexError {
                            message: format!(
                                "unsupported escape \\{}",
                                other.map(|c| c as char).unwrap_or(' ')
                            ),
                            line: self.line,
                            col: self.col,
                        })
                    }
                },
                Some(c) => text.push(c as char),
            }
        }
        Ok(Token { kind: TokenKind::Str, text, line, col })
    }

    fn number(&mut self) -> Result<Token, LexError> {
        let (line, col) = (self.line, self.col);
        let mut text = String::new();
        let mut is_float = false;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                text.push(c as char);
                self.bump();
            } else if c == b'.' && !is_float && self.peek2().map_or(false, |d| d.is_ascii_digit()) {
                is_float = true;
                text.push('.');
                self.bump();
            } else {
                break;
            }
        }
        let kind = if is_float { TokenKind::Float } else { TokenKind::Int };
        Ok(Token { kind, text, line, col })
    }

    fn ident(&mut self) -> Token {
        let (line, col) = (self.line, self.col);
        let mut text = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == b'_' {
                text.push(c as char);
                self.bump();
            } else {
                break;
            }
        }
        let kind = if KEYWORDS.contains(&text.as_str()) { TokenKind::Keyword } else { TokenKind::Ident };
        Token { kind, text, line, col }
    }

    fn punct(&mut self) -> Result<Token, LexError> {
        let (line, col) = (self.line, self.col);
        let c = self.peek().unwrap();
        let two = match (c, self.peek2()) {
            (b'=', Some(b'=')) => Some("=="),
            (b'!', Some(b'=')) => Some("!="),
            (b'<', Some(b'=')) => Some("<="),
            (b'>', Some(b'=')) => Some(">="),
            (b'&', Some(b'&')) => Some("&&"),
            (b'|', Some(b'|')) => Some("||"),
            _ => None,
        };
        if let Some(op) = two {
            self.bump();
            self.bump();
            return Ok(Token { kind: TokenKind::Punct, text: op.into(), line, col });
        }
        const SINGLES: &[u8] = b"{}()[]<>;,.=@!";
        if SINGLES.contains(&c) {
            self.bump();
            return Ok(Token { kind: TokenKind::Punct, text: (c as char).to_string(), line, col });
        }
        Err(self.error(format!("unexpected character '{}'", c as char)))
    }
}

/// Splits source into tokens. Whitespace and comments separate tokens and are
/// not represented in the output.
pub fn tokenize(src: &str) -> Result<Vec<Token>, LexError> {
    let mut lx = Lexer::new(src);
    let mut out = Vec::new();
    loop {
        lx.skip_trivia()?;
        let Some(c) = lx.peek() else { break };
        let tok = match c {
            b'"' => lx.string()?,
            _ if c.is_ascii_digit() => lx.number()?,
            _ if c.is_ascii_alphabetic() || c == b'_' => lx.ident(),
            _ => lx.punct()?,
        };
        out.push(tok);
    }
    Ok(out)
}

/// Renders a token the way it appeared in source (strings get their quotes
/// and escapes back). Joining these reproduces the source minus whitespace
/// and comments.
pub fn render_token(tok: &Token) -> String {
    match tok.kind {
        TokenKind::Str => {
            let mut s = String::from("\"");
            for ch in tok.text.chars() {
                match ch {
                    '"' => s.push_str("\\\""),
                    '\\' => s.push_str("\\\\"),
                    '\n' => s.push_str("\\n"),
                    '\t' => s.push_str("\\t"),
                    c => s.push(c),
                }
            }
            s.push('"');
            s
        }
        _ => tok.text.clone(),
    }
}
