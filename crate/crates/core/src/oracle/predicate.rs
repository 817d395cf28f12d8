use std::fmt;

/// Boolean expression over named state atoms.
///
/// Grammar (`&` binds tighter than `|`):
///
/// ```text
/// expr := term ('|' term)*
/// term := factor ('&' factor)*
/// factor := '!' factor | '(' expr ')' | atom
/// ```
///
/// Atoms are runs of `[A-Za-z0-9_:]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    Atom(String),
    Not(Box<Predicate>),
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Atom(String),
    Not,
    And,
    Or,
    Open,
    Close,
}

fn tokenize(s: &str) -> Result<Vec<Token>, String> {
    let mut out = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' => {
                chars.next();
            }
            '!' => {
                chars.next();
                out.push(Token::Not);
            }
            '&' => {
                chars.next();
                out.push(Token::And);
            }
            '|' => {
                chars.next();
                out.push(Token::Or);
            }
            '(' => {
                chars.next();
                out.push(Token::Open);
            }
            ')' => {
                chars.next();
                out.push(Token::Close);
            }
            c if c.is_ascii_alphanumeric() || c == '_' || c == ':' => {
                let mut atom = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' || c == ':' {
                        atom.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push(Token::Atom(atom));
            }
            other => return Err(format!("unexpected character {other:?} in {s:?}")),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Predicate, String> {
        let mut terms = vec![self.term()?];
        while self.peek() == Some(&Token::Or) {
            self.pos += 1;
            terms.push(self.term()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Predicate::Or(terms) })
    }

    fn term(&mut self) -> Result<Predicate, String> {
        let mut factors = vec![self.factor()?];
        while self.peek() == Some(&Token::And) {
            self.pos += 1;
            factors.push(self.factor()?);
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { Predicate::And(factors) })
    }

    fn factor(&mut self) -> Result<Predicate, String> {
        match self.next() {
            Some(Token::Not) => Ok(Predicate::Not(Box::new(self.factor()?))),
            Some(Token::Open) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Token::Close) => Ok(e),
                    _ => Err("missing ')'".into()),
                }
            }
            Some(Token::Atom(a)) => Ok(Predicate::Atom(a)),
            Some(t) => Err(format!("unexpected {t:?}")),
            None => Err("unexpected end of predicate".into()),
        }
    }
}

impl Predicate {
    pub fn parse(s: &str) -> Result<Self, String> {
        let tokens = tokenize(s)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(format!("trailing input in {s:?}"));
        }
        Ok(e)
    }

    pub fn eval(&self, atom: &dyn Fn(&str) -> bool) -> bool {
        match self {
            Predicate::Atom(a) => atom(a),
            Predicate::Not(p) => !p.eval(atom),
            Predicate::And(ps) => ps.iter().all(|p| p.eval(atom)),
            Predicate::Or(ps) => ps.iter().any(|p| p.eval(atom)),
        }
    }

    pub fn atoms(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Predicate::Atom(a) => out.push(a),
            Predicate::Not(p) => p.collect(out),
            Predicate::And(ps) | Predicate::Or(ps) => ps.iter().for_each(|p| p.collect(out)),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, ps: &[Predicate], sep: &str| {
            write!(f, "(")?;
            for (i, p) in ps.iter().enumerate() {
                if i > 0 {
                    write!(f, " {sep} ")?;
                }
                write!(f, "{p}")?;
            }
            write!(f, ")")
        };
        match self {
            Predicate::Atom(a) => write!(f, "{a}"),
            Predicate::Not(p) => write!(f, "!{p}"),
            Predicate::And(ps) => join(f, ps, "&"),
            Predicate::Or(ps) => join(f, ps, "|"),
        }
    }
}
