//! Comparison expressions over live sensor values.
//!
//! ```text
//! expr  := term (("&&" | "and") term)*
//! term  := "true"
//!        | sensor cmp number
//!        | "@elapsed" cmp number      (seconds in the current routine state)
//!        | "external(" name ")"
//! cmp   := "<" | "<=" | ">" | ">=" | "==" | "!="
//! ```

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    fn apply(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    True,
    Sensor { sensor: String, op: CmpOp, value: f64 },
    Elapsed { op: CmpOp, seconds: f64 },
    External(String),
}

/// A conjunction of terms. The empty conjunction is never produced by the parser.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    terms: Vec<Term>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditionError {
    #[error("syntax error at column {col}: {msg}")]
    Syntax { col: usize, msg: String },
    #[error("sensor {0:?} has no value in context")]
    MissingSensor(String),
}

/// Values an expression can be evaluated against.
pub trait EvalContext {
    fn sensor(&self, id: &str) -> Option<f64>;

    fn elapsed_in_state_ms(&self) -> Option<u64> {
        None
    }

    fn external(&self, _name: &str) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorReading {
    pub value: f64,
    pub recv_ts: u64,
}

/// Latest accepted value of every sensor, fed from `state` subscriptions.
#[derive(Debug, Clone, Default)]
pub struct SensorContext {
    values: BTreeMap<String, SensorReading>,
}

impl SensorContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, id: &str, value: f64, recv_ts: u64) {
        self.values.insert(id.to_string(), SensorReading { value, recv_ts });
    }

    pub fn get(&self, id: &str) -> Option<SensorReading> {
        self.values.get(id).copied()
    }

    /// True when the sensor has a reading no older than `max_age_ms`.
    pub fn is_fresh(&self, id: &str, now_ms: u64, max_age_ms: u64) -> bool {
        self.values.get(id).is_some_and(|r| now_ms.saturating_sub(r.recv_ts) <= max_age_ms)
    }
}

impl EvalContext for SensorContext {
    fn sensor(&self, id: &str) -> Option<f64> {
        self.values.get(id).map(|r| r.value)
    }
}

impl Expr {
    pub fn always() -> Self {
        Self { terms: vec![Term::True] }
    }

    pub fn parse(src: &str) -> Result<Self, ConditionError> {
        Parser::new(src).parse()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn sensors(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().filter_map(|t| match t {
            Term::Sensor { sensor, .. } => Some(sensor.as_str()),
            _ => None,
        })
    }

    pub fn uses_routine_terms(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, Term::Elapsed { .. } | Term::External(_)))
    }

    pub fn evaluate(&self, ctx: &dyn EvalContext) -> Result<bool, ConditionError> {
        let mut result = true;
        // Every term is checked so a missing sensor is reported even after a false term.
        for term in &self.terms {
            let ok = match term {
                Term::True => true,
                Term::Sensor { sensor, op, value } => {
                    let v = ctx.sensor(sensor).ok_or_else(|| ConditionError::MissingSensor(sensor.clone()))?;
                    op.apply(v, *value)
                }
                Term::Elapsed { op, seconds } => ctx
                    .elapsed_in_state_ms()
                    .is_some_and(|ms| op.apply(ms as f64 / 1000.0, *seconds)),
                Term::External(name) => ctx.external(name),
            };
            result &= ok;
        }
        Ok(result)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" && ")?;
            }
            match t {
                Term::True => f.write_str("true")?,
                Term::Sensor { sensor, op, value } => write!(f, "{sensor} {} {value}", op.symbol())?,
                Term::Elapsed { op, seconds } => write!(f, "@elapsed {} {seconds}", op.symbol())?,
                Term::External(n) => write!(f, "external({n})")?,
            }
        }
        Ok(())
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ConditionError> {
        Err(ConditionError::Syntax {
            col: self.pos + 1,
            msg: msg.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Option<&'a str> {
        self.skip_ws();
        let rest = self.rest();
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return None,
        }
        let end = chars
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        self.pos += end;
        Some(&rest[..end])
    }

    fn cmp(&mut self) -> Result<CmpOp, ConditionError> {
        for (tok, op) in [
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("==", CmpOp::Eq),
            ("!=", CmpOp::Ne),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
        ] {
            if self.eat(tok) {
                return Ok(op);
            }
        }
        self.err("expected comparison operator")
    }

    fn number(&mut self) -> Result<f64, ConditionError> {
        self.skip_ws();
        let rest = self.rest();
        let end = rest
            .char_indices()
            .find(|(i, c)| !(c.is_ascii_digit() || *c == '.' || ((*c == '-' || *c == '+') && *i == 0) || *c == 'e' || *c == 'E'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        match rest[..end].parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos += end;
                // optional seconds suffix for elapsed guards
                if self.rest().starts_with('s') && !self.rest()[1..].starts_with(|c: char| c.is_ascii_alphanumeric()) {
                    self.pos += 1;
                }
                Ok(v)
            }
            _ => self.err("expected number"),
        }
    }

    fn term(&mut self) -> Result<Term, ConditionError> {
        if self.eat("@elapsed") {
            let op = self.cmp()?;
            let seconds = self.number()?;
            return Ok(Term::Elapsed { op, seconds });
        }
        let start = self.pos;
        let Some(name) = self.ident() else {
            return self.err("expected sensor name, `true`, `@elapsed` or `external(..)`");
        };
        match name {
            "true" => Ok(Term::True),
            "external" => {
                if !self.eat("(") {
                    return self.err("expected `(`");
                }
                let Some(n) = self.ident() else {
                    return self.err("expected trigger name");
                };
                if !self.eat(")") {
                    return self.err("expected `)`");
                }
                Ok(Term::External(n.to_string()))
            }
            "and" => {
                self.pos = start;
                self.err("dangling conjunction")
            }
            sensor => {
                let op = self.cmp()?;
                let value = self.number()?;
                Ok(Term::Sensor {
                    sensor: sensor.to_string(),
                    op,
                    value,
                })
            }
        }
    }

    fn parse(mut self) -> Result<Expr, ConditionError> {
        let mut terms = vec![self.term()?];
        loop {
            self.skip_ws();
            if self.pos == self.src.len() {
                break;
            }
            if !(self.eat("&&") || self.eat_word("and")) {
                return self.err("expected `&&` or end of expression");
            }
            terms.push(self.term()?);
        }
        Ok(Expr { terms })
    }

    fn eat_word(&mut self, word: &str) -> bool {
        self.skip_ws();
        let rest = self.rest();
        if rest.starts_with(word) && !rest[word.len()..].starts_with(|c: char| c.is_ascii_alphanumeric() || c == '_') {
            self.pos += word.len();
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Ctx {
        sensors: BTreeMap<&'static str, f64>,
        elapsed: Option<u64>,
    }

    impl EvalContext for Ctx {
        fn sensor(&self, id: &str) -> Option<f64> {
            self.sensors.get(id).copied()
        }
        fn elapsed_in_state_ms(&self) -> Option<u64> {
            self.elapsed
        }
        fn external(&self, name: &str) -> bool {
            name == "go"
        }
    }

    fn ctx(pairs: &[(&'static str, f64)]) -> Ctx {
        Ctx {
            sensors: pairs.iter().copied().collect(),
            elapsed: Some(45_000),
        }
    }

    #[test]
    fn threshold_comparisons() {
        let e = Expr::parse("LT1 >= 100").unwrap();
        assert!(e.evaluate(&ctx(&[("LT1", 250.0)])).unwrap());
        assert!(!e.evaluate(&ctx(&[("LT1", 40.0)])).unwrap());
    }

    #[test]
    fn conjunctions_and_guards() {
        let e = Expr::parse("LT1 > 800 and FT2 != 0 && @elapsed >= 30s").unwrap();
        assert_eq!(e.terms().len(), 3);
        assert!(e.evaluate(&ctx(&[("LT1", 900.0), ("FT2", 1.0)])).unwrap());
        assert!(!e.evaluate(&ctx(&[("LT1", 900.0), ("FT2", 0.0)])).unwrap());
        assert!(Expr::parse("external(go)").unwrap().evaluate(&ctx(&[])).unwrap());
        assert!(Expr::parse("true").unwrap().evaluate(&ctx(&[])).unwrap());
    }

    #[test]
    fn missing_sensor_is_an_error() {
        let e = Expr::parse("LT9 < 1").unwrap();
        assert_eq!(e.evaluate(&ctx(&[])), Err(ConditionError::MissingSensor("LT9".into())));
    }

    #[test]
    fn syntax_errors_carry_columns() {
        for bad in ["", "LT1 >", "LT1 100", "LT1 > 1 &&", "LT1 > 1 LT2 < 2", "external(x"] {
            assert!(matches!(Expr::parse(bad), Err(ConditionError::Syntax { .. })), "{bad:?}");
        }
        let Err(ConditionError::Syntax { col, .. }) = Expr::parse("LT1 > abc") else {
            panic!()
        };
        assert_eq!(col, 7);
    }

    #[test]
    fn display_round_trips() {
        let e = Expr::parse("T1.level>=100.5&&@elapsed<3").unwrap();
        assert_eq!(Expr::parse(&e.to_string()).unwrap(), e);
    }
}
