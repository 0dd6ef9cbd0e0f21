//! A small, total SQL lexer.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Keyword or bare identifier, lowercased.
    Word,
    /// `"ident"` or `` `ident` ``, content lowercased.
    QuotedIdent,
    /// `'...'` string literal, content kept verbatim.
    Str,
    Num,
    /// Parentheses, commas, semicolons, dots and operators.
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
}

impl Token {
    fn new(kind: TokenKind, text: impl Into<String>) -> Self {
        Self { kind, text: text.into() }
    }

    pub fn is_word(&self, w: &str) -> bool {
        self.kind == TokenKind::Word && self.text == w
    }

    pub fn is_punct(&self, p: &str) -> bool {
        self.kind == TokenKind::Punct && self.text == p
    }
}

const TWO_CHAR_OPS: &[&str] = &["<=", ">=", "<>", "!=", "||", "::", "==", "->", "=>"];

/// Split `sql` into tokens. Comments are dropped; an unterminated literal or
/// comment runs to the end of input.
pub fn lex(sql: &str) -> Vec<Token> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let n = chars.len();
    while i < n {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < n && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < n && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            i = (i + 2).min(n);
        } else if c == '\'' {
            // '' inside a literal is an escaped quote
            let mut s = String::new();
            i += 1;
            while i < n {
                if chars[i] == '\'' {
                    if chars.get(i + 1) == Some(&'\'') {
                        s.push('\'');
                        i += 2;
                        continue;
                    }
                    i += 1;
                    break;
                }
                s.push(chars[i]);
                i += 1;
            }
            out.push(Token::new(TokenKind::Str, s));
        } else if c == '"' || c == '`' {
            let close = c;
            let mut s = String::new();
            i += 1;
            while i < n && chars[i] != close {
                s.push(chars[i]);
                i += 1;
            }
            i = (i + 1).min(n);
            out.push(Token::new(TokenKind::QuotedIdent, s.to_lowercase()));
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < n {
                let d = chars[i];
                let exponent_sign = (d == '+' || d == '-') && matches!(chars[i - 1], 'e' | 'E');
                if d.is_ascii_alphanumeric() || d == '.' || d == '_' || exponent_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            out.push(Token::new(TokenKind::Num, chars[start..i].iter().collect::<String>()));
        } else if c.is_alphanumeric() || c == '_' || c == '$' || c == '#' {
            let start = i;
            while i < n && (chars[i].is_alphanumeric() || matches!(chars[i], '_' | '$' | '#')) {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            out.push(Token::new(TokenKind::Word, word.to_lowercase()));
        } else {
            let pair: String = chars[i..(i + 2).min(n)].iter().collect();
            if TWO_CHAR_OPS.contains(&pair.as_str()) {
                out.push(Token::new(TokenKind::Punct, pair));
                i += 2;
            } else {
                out.push(Token::new(TokenKind::Punct, c.to_string()));
                i += 1;
            }
        }
    }
    out
}
