//! Minimal SQL lexer. Enough structure for identifier extraction and
//! top-level clause detection; not a grammar.

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    /// Bare word: keyword or unquoted identifier.
    Word(String),
    /// Identifier in backticks, brackets or double quotes, unescaped.
    Quoted(String),
    /// Single-quoted string literal, unescaped.
    Str(String),
    Number(String),
    Punct(char),
}

impl Token {
    pub fn is_word(&self, kw: &str) -> bool {
        matches!(self, Token::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    /// Identifier text for bare words and quoted identifiers.
    pub fn ident(&self) -> Option<&str> {
        match self {
            Token::Word(w) | Token::Quoted(w) => Some(w),
            _ => None,
        }
    }
}

fn read_delimited(chars: &[char], start: usize, close: char) -> (String, usize) {
    let mut out = String::new();
    let mut i = start;
    while i < chars.len() {
        if chars[i] == close {
            // doubled closer is an escaped literal closer (except for `]`)
            if close != ']' && i + 1 < chars.len() && chars[i + 1] == close {
                out.push(close);
                i += 2;
                continue;
            }
            return (out, i + 1);
        }
        out.push(chars[i]);
        i += 1;
    }
    (out, i)
}

pub fn tokenize(sql: &str) -> Vec<Token> {
    let chars: Vec<char> = sql.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            i = (i + 2).min(chars.len());
        } else if c == '\'' {
            let (s, next) = read_delimited(&chars, i + 1, '\'');
            tokens.push(Token::Str(s));
            i = next;
        } else if c == '`' || c == '"' || c == '[' {
            let close = if c == '[' { ']' } else { c };
            let (s, next) = read_delimited(&chars, i + 1, close);
            tokens.push(Token::Quoted(s));
            i = next;
        } else if c.is_ascii_digit()
            || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            let start = i;
            while i < chars.len()
                && (chars[i].is_ascii_alphanumeric() || chars[i] == '.' || chars[i] == '_')
            {
                i += 1;
            }
            tokens.push(Token::Number(chars[start..i].iter().collect()));
        } else if c.is_alphanumeric() || c == '_' || c == '$' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$')
            {
                i += 1;
            }
            tokens.push(Token::Word(chars[start..i].iter().collect()));
        } else {
            tokens.push(Token::Punct(c));
            i += 1;
        }
    }
    tokens
}

/// True iff the statement carries an `ORDER BY` outside any parentheses.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let tokens = tokenize(sql);
    let mut depth = 0i32;
    for (i, t) in tokens.iter().enumerate() {
        match t {
            Token::Punct('(') => depth += 1,
            Token::Punct(')') => depth -= 1,
            _ if depth == 0 && t.is_word("order") => {
                if tokens.get(i + 1).is_some_and(|n| n.is_word("by")) {
                    return true;
                }
            }
            _ => {}
        }
    }
    false
}

/// Removes a `DISTINCT` directly following any `SELECT`.
pub fn strip_distinct(sql: &str) -> String {
    let tokens = tokenize(sql);
    if !tokens
        .windows(2)
        .any(|w| w[0].is_word("select") && w[1].is_word("distinct"))
    {
        return sql.to_string();
    }
    let mut out = String::new();
    let mut prev_select = false;
    for t in &tokens {
        if prev_select && t.is_word("distinct") {
            prev_select = false;
            continue;
        }
        prev_select = t.is_word("select");
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&render(t));
    }
    out
}

fn render(t: &Token) -> String {
    match t {
        Token::Word(w) | Token::Number(w) => w.clone(),
        Token::Quoted(q) => format!("\"{}\"", q.replace('"', "\"\"")),
        Token::Str(s) => format!("'{}'", s.replace('\'', "''")),
        Token::Punct(c) => c.to_string(),
    }
}
