//! Equation lexing, number masking and variable normalization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK: &str = "[M]";
pub const OPERATORS: [char; 8] = ['+', '-', '*', '/', '^', '=', '(', ')'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Operator,
    Number,
    Variable,
}

impl TokenKind {
    pub fn index(self) -> usize {
        match self {
            TokenKind::Operator => 0,
            TokenKind::Number => 1,
            TokenKind::Variable => 2,
        }
    }
}

/// One math token. Number tokens carry their value and canonical spelling;
/// the only number-kind token without a value is the template mask `[M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TypedToken {
    pub surface: String,
    pub kind: TokenKind,
    pub value: Option<f64>,
    canonical: Option<String>,
}

impl TypedToken {
    fn operator(c: char) -> Self {
        TypedToken {
            surface: c.to_string(),
            kind: TokenKind::Operator,
            value: None,
            canonical: None,
        }
    }

    fn variable(c: char) -> Self {
        TypedToken {
            surface: c.to_string(),
            kind: TokenKind::Variable,
            value: None,
            canonical: None,
        }
    }

    fn number(surface: &str) -> Option<Self> {
        let canonical = canonical_number(surface)?;
        let value = canonical.parse::<f64>().ok()?;
        Some(TypedToken {
            surface: surface.to_string(),
            kind: TokenKind::Number,
            value: Some(value),
            canonical: Some(canonical),
        })
    }

    fn mask() -> Self {
        TypedToken {
            surface: MASK.to_string(),
            kind: TokenKind::Number,
            value: None,
            canonical: None,
        }
    }

    /// Canonical decimal spelling of a number token (`"0.50"` -> `"0.5"`).
    pub fn canonical(&self) -> Option<&str> {
        self.canonical.as_deref()
    }

    pub fn is_number(&self) -> bool {
        self.value.is_some()
    }
}

/// Canonical spelling of a plain decimal numeral: no leading zeros on the
/// integer part, no trailing zeros on the fraction, no dangling point.
/// Returns `None` for anything that is not `digits[.digits]` / `.digits`.
pub fn canonical_number(s: &str) -> Option<String> {
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let frac = frac.trim_end_matches('0');
    Some(if frac.is_empty() {
        int.to_string()
    } else {
        format!("{}.{}", int, frac)
    })
}

/// Token and template streams for a set of equations, concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct EquationSequence {
    pub tokens: Vec<TypedToken>,
    pub template: Vec<String>,
    /// Exclusive end offset of each equation within `tokens`.
    pub boundaries: Vec<usize>,
}

impl EquationSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions of number tokens.
    pub fn number_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_number())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn surfaces(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.surface.clone()).collect()
    }

    /// The individual equations as token slices.
    pub fn equations(&self) -> Vec<&[TypedToken]> {
        let mut start = 0;
        self.boundaries
            .iter()
            .map(|&end| {
                let s = &self.tokens[start..end];
                start = end;
                s
            })
            .collect()
    }
}

fn lex(raw: &str) -> Result<Vec<TypedToken>> {
    let chars: Vec<char> = raw.chars().collect();
    let mut tokens = Vec::new();
    let mut depth = 0i64;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let surface: String = chars[start..i].iter().collect();
            tokens.push(TypedToken::number(&surface).ok_or(Error::IllegalChar { ch: c, pos: start })?);
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            if i - start > 1 {
                return Err(Error::MultiLetterIdentifier(chars[start..i].iter().collect()));
            }
            tokens.push(TypedToken::variable(c));
        } else if c == '[' && chars.get(i + 1) == Some(&'M') && chars.get(i + 2) == Some(&']') {
            tokens.push(TypedToken::mask());
            i += 3;
        } else if OPERATORS.contains(&c) {
            match c {
                '(' => depth += 1,
                ')' => {
                    depth -= 1;
                    if depth < 0 {
                        return Err(Error::UnbalancedParens);
                    }
                }
                _ => {}
            }
            tokens.push(TypedToken::operator(c));
            i += 1;
        } else {
            return Err(Error::IllegalChar { ch: c, pos: i });
        }
    }
    if depth != 0 {
        return Err(Error::UnbalancedParens);
    }
    if tokens.is_empty() {
        return Err(Error::EmptyEquation);
    }
    Ok(tokens)
}

fn template_of(tokens: &[TypedToken]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| if t.kind == TokenKind::Number { MASK.to_string() } else { t.surface.clone() })
        .collect()
}

/// Lexes one equation into typed tokens and its number-masked template.
pub fn tokenize_equation(raw: &str) -> Result<EquationSequence> {
    let tokens = lex(raw)?;
    let template = template_of(&tokens);
    let n = tokens.len();
    Ok(EquationSequence {
        tokens,
        template,
        boundaries: vec![n],
    })
}

/// Lexes an equation set into one concatenated sequence.
pub fn tokenize_equations<S: AsRef<str>>(equations: &[S]) -> Result<EquationSequence> {
    if equations.is_empty() {
        return Err(Error::EmptyEquation);
    }
    let mut tokens = Vec::new();
    let mut boundaries = Vec::with_capacity(equations.len());
    for e in equations {
        tokens.extend(lex(e.as_ref())?);
        boundaries.push(tokens.len());
    }
    let template = template_of(&tokens);
    Ok(EquationSequence {
        tokens,
        template,
        boundaries,
    })
}

/// Joins token surfaces back into equation text (no spaces).
pub fn detokenize(tokens: &[TypedToken]) -> String {
    tokens.iter().map(|t| t.surface.as_str()).collect()
}

/// Replaces every numeral in `raw` with `[M]`, leaving everything else intact.
pub fn mask_numbers(raw: &str) -> Result<String> {
    Ok(lex(raw)?
        .iter()
        .map(|t| if t.kind == TokenKind::Number { MASK } else { t.surface.as_str() })
        .collect())
}

const NORMALIZED: [char; 3] = ['x', 'y', 'z'];

/// Renames variables to x, y, z in order of first appearance across the
/// whole equation set.
pub fn normalize_variables<S: AsRef<str>>(equations: &[S]) -> Result<Vec<String>> {
    let mut mapping: HashMap<char, char> = HashMap::new();
    let mut order = 0usize;
    let mut scanned: Vec<Vec<(char, bool)>> = Vec::with_capacity(equations.len());
    for e in equations {
        let chars: Vec<char> = e.as_ref().chars().collect();
        let mut marked = Vec::with_capacity(chars.len());
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c == '[' && chars.get(i + 1) == Some(&'M') && chars.get(i + 2) == Some(&']') {
                marked.extend([('[', false), ('M', false), (']', false)]);
                i += 3;
                continue;
            }
            if c.is_ascii_alphabetic() {
                let mut j = i;
                while j < chars.len() && chars[j].is_ascii_alphanumeric() {
                    j += 1;
                }
                if j - i > 1 {
                    return Err(Error::MultiLetterIdentifier(chars[i..j].iter().collect()));
                }
                if !mapping.contains_key(&c) {
                    if order < NORMALIZED.len() {
                        mapping.insert(c, NORMALIZED[order]);
                    }
                    order += 1;
                }
                marked.push((c, true));
            } else {
                marked.push((c, false));
            }
            i += 1;
        }
        scanned.push(marked);
    }
    if order > NORMALIZED.len() {
        return Err(Error::TooManyVariables(order));
    }
    Ok(scanned
        .into_iter()
        .map(|chars| {
            chars
                .into_iter()
                .map(|(c, var)| if var { mapping[&c] } else { c })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(seq: &EquationSequence) -> Vec<TokenKind> {
        seq.tokens.iter().map(|t| t.kind).collect()
    }

    #[test]
    fn lexes_decimal_coefficients() {
        let seq = tokenize_equation("0.5*x+0.3*y=10").unwrap();
        assert_eq!(seq.surfaces(), vec!["0.5", "*", "x", "+", "0.3", "*", "y", "=", "10"]);
        assert_eq!(seq.tokens[0].value, Some(0.5));
        assert_eq!(seq.template.concat(), "[M]*x+[M]*y=[M]");
        assert_eq!(seq.number_positions(), vec![0, 4, 8]);
    }

    #[test]
    fn no_numbers_means_identical_template() {
        let seq = tokenize_equation("x=y").unwrap();
        use TokenKind::*;
        assert_eq!(kinds(&seq), vec![Variable, Operator, Variable]);
        assert_eq!(seq.template, seq.surfaces());
    }

    #[test]
    fn parenthesized_equation() {
        let seq = tokenize_equation("4*(x-y)=800").unwrap();
        assert_eq!(seq.len(), 9);
        let nums: Vec<f64> = seq.tokens.iter().filter_map(|t| t.value).collect();
        assert_eq!(nums, vec![4.0, 800.0]);
    }

    #[test]
    fn lexer_errors() {
        assert!(matches!(tokenize_equation("x=5$"), Err(Error::IllegalChar { ch: '$', .. })));
        assert!(matches!(tokenize_equation("   "), Err(Error::EmptyEquation)));
        assert!(matches!(tokenize_equation("(x+1=2"), Err(Error::UnbalancedParens)));
        assert!(matches!(tokenize_equation("x)+1=(2"), Err(Error::UnbalancedParens)));
        assert!(matches!(tokenize_equation("rate*2=4"), Err(Error::MultiLetterIdentifier(_))));
    }

    #[test]
    fn canonical_numbers() {
        assert_eq!(canonical_number("0.50").as_deref(), Some("0.5"));
        assert_eq!(canonical_number("007").as_deref(), Some("7"));
        assert_eq!(canonical_number("4.0").as_deref(), Some("4"));
        assert_eq!(canonical_number(".25").as_deref(), Some("0.25"));
        assert_eq!(canonical_number("0").as_deref(), Some("0"));
        assert_eq!(canonical_number("1e5"), None);
        assert_eq!(canonical_number("."), None);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_variables(&["u+v+r=100", "u-r=10"]).unwrap(), vec!["x+y+z=100", "x-z=10"]);
        assert_eq!(normalize_variables(&["x=5"]).unwrap(), vec!["x=5"]);
        assert_eq!(normalize_variables(&["b=a+1"]).unwrap(), vec!["x=y+1"]);
        assert!(matches!(normalize_variables(&["a+b+c+d=1"]), Err(Error::TooManyVariables(4))));
    }

    #[test]
    fn multi_equation_boundaries() {
        let seq = tokenize_equations(&["4*(x-y)=800", "2*(x+y)=800"]).unwrap();
        assert_eq!(seq.boundaries, vec![9, 18]);
        let eqs = seq.equations();
        assert_eq!(detokenize(eqs[1]), "2*(x+y)=800");
    }
}
