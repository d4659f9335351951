//! Declarative knowledge base of vine water-stress concepts.
//!
//! A knowledge base is a set of concepts and relations between them. Four
//! primary kinds are built in (`Variable`, `Condition`, `Constraint`,
//! `ShiftStage`) and every declared concept must be a (possibly multiple)
//! sub-concept of at least one of them. Relations are:
//!
//! * `subsumption` (`sub ≼ sup`), a partial order checked acyclic at load;
//! * `is_before`, temporal precedence between phenological stages;
//! * `has_condition` / `has_constraint`, attaching a condition or a
//!   constraint concept to the concept it applies to.
//!
//! The document also carries shift-stage rules (deriving one stage from
//! another by a thermal-time offset) and numeric levels, optionally
//! specialised per region and variety.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phenology::{PhenologyCalendar, Stage, StageDate};

pub const PRIMARY_KINDS: [&str; 4] = ["Variable", "Condition", "Constraint", "ShiftStage"];

/// Unit strings accepted on concepts and levels.
pub const UNITS: [&str; 17] = [
    "mm", "mm/day", "mm/h", "kPa", "MPa", "°C", "GDD", "g/L", "g", "g/h", "mg/L", "gH2SO4/L", "W/m2", "km/h",
    "%", "1", "1/day",
];

/// Shipped knowledge file encoding the vine water-stress ontology.
pub const DEFAULT_KNOWLEDGE: &str = include_str!("../data/ovws.json");

#[derive(Debug, Error, PartialEq)]
pub enum KnowledgeError {
    #[error("malformed knowledge document: {0}")]
    Parse(String),
    #[error("subsumption cycle: {}", .0.join(" ≼ "))]
    Cycle(Vec<String>),
    #[error("unknown concept '{0}'")]
    UnknownConcept(String),
    #[error("concept '{0}' declared twice")]
    Duplicate(String),
    #[error("concept '{0}' is not a sub-concept of any primary kind")]
    Orphan(String),
    #[error("concept '{concept}': {message}")]
    Invalid { concept: String, message: String },
    #[error("unknown unit '{unit}' on '{owner}'")]
    UnknownUnit { owner: String, unit: String },
    #[error("unbound variable '{0}'")]
    Unbound(String),
    #[error("cannot compare {0} with {1}")]
    TypeMismatch(String, String),
    #[error("negative shift offset {0}")]
    NegativeOffset(f64),
    #[error("stage {0} has no date in the calendar")]
    UndatedStage(Stage),
    #[error("'{0}' is not a phenological stage")]
    NotAStage(String),
    #[error("thermal time exhausted: need {needed:.1} GDD, series ends at {available:.1}")]
    GddExhausted { needed: f64, available: f64 },
    #[error("source date {0} outside the thermal-time series")]
    SourceUncovered(NaiveDate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl CmpOp {
    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Eq => ord == Equal,
            CmpOp::Ge => ord != Less,
            CmpOp::Gt => ord == Greater,
        }
    }
}

/// A bound value: a number or a calendar date.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Number(f64),
    Date(NaiveDate),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Number(_) => "number",
            Value::Date(_) => "date",
        }
    }

    fn compare(&self, other: &Value) -> Result<std::cmp::Ordering, KnowledgeError> {
        match (self, other) {
            (Value::Number(a), Value::Number(b)) => a
                .partial_cmp(b)
                .ok_or_else(|| KnowledgeError::TypeMismatch("NaN".into(), "number".into())),
            (Value::Date(a), Value::Date(b)) => Ok(a.cmp(b)),
            (a, b) => Err(KnowledgeError::TypeMismatch(a.kind().into(), b.kind().into())),
        }
    }
}

pub type Bindings = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Concept(String),
    Number(f64),
    Date(NaiveDate),
}

impl Operand {
    fn resolve(&self, bindings: &Bindings) -> Result<Value, KnowledgeError> {
        match self {
            Operand::Concept(name) => bindings
                .get(name)
                .copied()
                .ok_or_else(|| KnowledgeError::Unbound(name.clone())),
            Operand::Number(v) => Ok(Value::Number(*v)),
            Operand::Date(d) => Ok(Value::Date(*d)),
        }
    }

    fn concept(&self) -> Option<&str> {
        match self {
            Operand::Concept(c) => Some(c),
            _ => None,
        }
    }

    fn literal(&self) -> Option<Value> {
        match self {
            Operand::Concept(_) => None,
            Operand::Number(v) => Some(Value::Number(*v)),
            Operand::Date(d) => Some(Value::Date(*d)),
        }
    }
}

/// `left op right`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub op: CmpOp,
    pub left: Operand,
    pub right: Operand,
}

impl Condition {
    pub fn evaluate(&self, bindings: &Bindings) -> Result<bool, KnowledgeError> {
        let l = self.left.resolve(bindings)?;
        let r = self.right.resolve(bindings)?;
        Ok(self.op.holds(l.compare(&r)?))
    }
}

/// Second bound of a two-fold constraint (a restriction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub op: CmpOp,
    pub operand: Operand,
}

/// `subject op operand`, and `subject restriction.op restriction.operand`
/// when a restriction is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub op: CmpOp,
    pub operand: Operand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restriction: Option<Bound>,
}

impl Constraint {
    pub fn new(op: CmpOp, operand: Operand) -> Self {
        Constraint {
            op,
            operand,
            restriction: None,
        }
    }

    pub fn between(lower: Operand, upper: Operand) -> Self {
        Constraint {
            op: CmpOp::Ge,
            operand: lower,
            restriction: Some(Bound {
                op: CmpOp::Le,
                operand: upper,
            }),
        }
    }

    /// Evaluate against the value bound to `subject`.
    pub fn evaluate(&self, subject: &str, bindings: &Bindings) -> Result<bool, KnowledgeError> {
        let s = bindings
            .get(subject)
            .copied()
            .ok_or_else(|| KnowledgeError::Unbound(subject.to_string()))?;
        let first = self.op.holds(s.compare(&self.operand.resolve(bindings)?)?);
        match &self.restriction {
            None => Ok(first),
            Some(b) => {
                let second = b.op.holds(s.compare(&b.operand.resolve(bindings)?)?);
                Ok(first && second)
            }
        }
    }

    fn check_bounds(&self) -> Result<(), String> {
        let Some(b) = &self.restriction else { return Ok(()) };
        let lower_side = matches!(self.op, CmpOp::Ge | CmpOp::Gt);
        let upper_side = matches!(b.op, CmpOp::Le | CmpOp::Lt);
        if !(lower_side && upper_side) {
            let flipped = matches!(self.op, CmpOp::Le | CmpOp::Lt) && matches!(b.op, CmpOp::Ge | CmpOp::Gt);
            if !flipped {
                return Err("restriction must combine a lower and an upper bound".into());
            }
        }
        if let (Some(a), Some(c)) = (self.operand.literal(), b.operand.literal()) {
            let (lo, hi) = if lower_side { (a, c) } else { (c, a) };
            match lo.compare(&hi) {
                Ok(std::cmp::Ordering::Greater) => return Err("restriction lower bound exceeds upper bound".into()),
                Err(e) => return Err(e.to_string()),
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<Constraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Relation {
    Subsumption { sub: String, sup: String },
    IsBefore { before: String, after: String },
    HasCondition { subject: String, condition: String },
    HasConstraint { subject: String, constraint: String },
}

impl Relation {
    fn endpoints(&self) -> [&str; 2] {
        match self {
            Relation::Subsumption { sub, sup } => [sub, sup],
            Relation::IsBefore { before, after } => [before, after],
            Relation::HasCondition { subject, condition } => [subject, condition],
            Relation::HasConstraint { subject, constraint } => [subject, constraint],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRuleDoc {
    pub source: String,
    pub target: String,
    /// Falls back to the project default when absent.
    #[serde(default)]
    pub offset_gdd: Option<f64>,
    #[serde(default)]
    pub variety: Option<String>,
}

/// A stage derived from another one by a thermal-time offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStageRule {
    pub source: Stage,
    pub target: Stage,
    pub offset_gdd: f64,
    pub variety: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub name: String,
    pub value: f64,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub region: Option<String>,
    #[serde(default)]
    pub variety: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeDocument {
    #[serde(default)]
    pub concepts: Vec<Concept>,
    #[serde(default)]
    pub relations: Vec<Relation>,
    #[serde(default)]
    pub shift_rules: Vec<ShiftRuleDoc>,
    #[serde(default)]
    pub levels: Vec<Level>,
}

/// A validated, immutable knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    concepts: BTreeMap<String, Concept>,
    relations: Vec<Relation>,
    /// sub -> direct super-concepts
    parents: BTreeMap<String, BTreeSet<String>>,
    /// sup -> direct sub-concepts
    children: BTreeMap<String, BTreeSet<String>>,
    shift_rules: Vec<ShiftRuleDoc>,
    levels: Vec<Level>,
}

fn check_unit(owner: &str, unit: &Option<String>) -> Result<(), KnowledgeError> {
    match unit {
        Some(u) if !UNITS.contains(&u.as_str()) => Err(KnowledgeError::UnknownUnit {
            owner: owner.to_string(),
            unit: u.clone(),
        }),
        _ => Ok(()),
    }
}

/// Parse and validate a knowledge document.
pub fn load_kb(document: &str) -> Result<KnowledgeBase, KnowledgeError> {
    let doc: KnowledgeDocument = serde_json::from_str(document).map_err(|e| KnowledgeError::Parse(e.to_string()))?;
    KnowledgeBase::from_document(doc)
}

impl KnowledgeBase {
    pub fn shipped_default() -> KnowledgeBase {
        load_kb(DEFAULT_KNOWLEDGE).expect("shipped knowledge file is valid")
    }

    pub fn from_document(doc: KnowledgeDocument) -> Result<KnowledgeBase, KnowledgeError> {
        let mut concepts = BTreeMap::new();
        for c in doc.concepts {
            if PRIMARY_KINDS.contains(&c.name.as_str()) || concepts.contains_key(&c.name) {
                return Err(KnowledgeError::Duplicate(c.name));
            }
            check_unit(&c.name, &c.unit)?;
            concepts.insert(c.name.clone(), c);
        }
        let declared = |n: &str| PRIMARY_KINDS.contains(&n) || concepts.contains_key(n);
        for r in &doc.relations {
            for e in r.endpoints() {
                if !declared(e) {
                    return Err(KnowledgeError::UnknownConcept(e.to_string()));
                }
            }
        }
        let mut parents: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut children: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &doc.relations {
            if let Relation::Subsumption { sub, sup } = r {
                parents.entry(sub.clone()).or_default().insert(sup.clone());
                children.entry(sup.clone()).or_default().insert(sub.clone());
            }
        }
        if let Some(cycle) = find_cycle(&parents) {
            return Err(KnowledgeError::Cycle(cycle));
        }
        let kb = KnowledgeBase {
            concepts,
            relations: doc.relations,
            parents,
            children,
            shift_rules: doc.shift_rules,
            levels: doc.levels,
        };
        kb.validate_concepts()?;
        kb.validate_rules()?;
        Ok(kb)
    }

    fn validate_concepts(&self) -> Result<(), KnowledgeError> {
        for (name, c) in &self.concepts {
            if !PRIMARY_KINDS.iter().any(|p| self.is_subconcept(name, p)) {
                return Err(KnowledgeError::Orphan(name.clone()));
            }
            let invalid = |message: &str| KnowledgeError::Invalid {
                concept: name.clone(),
                message: message.to_string(),
            };
            if let Some(cond) = &c.condition {
                if !self.is_subconcept(name, "Condition") {
                    return Err(invalid("carries a condition but is not a Condition"));
                }
                for op in [&cond.left, &cond.right] {
                    self.check_operand(op)?;
                }
            }
            if let Some(cons) = &c.constraint {
                if !self.is_subconcept(name, "Constraint") {
                    return Err(invalid("carries a constraint but is not a Constraint"));
                }
                self.check_operand(&cons.operand)?;
                if let Some(b) = &cons.restriction {
                    self.check_operand(&b.operand)?;
                }
                cons.check_bounds().map_err(|m| invalid(&m))?;
            }
        }
        for r in &self.relations {
            match r {
                Relation::HasCondition { condition, .. } => {
                    if self.concepts.get(condition).and_then(|c| c.condition.as_ref()).is_none() {
                        return Err(KnowledgeError::Invalid {
                            concept: condition.clone(),
                            message: "has_condition target defines no condition".into(),
                        });
                    }
                }
                Relation::HasConstraint { constraint, .. } => {
                    if self.concepts.get(constraint).and_then(|c| c.constraint.as_ref()).is_none() {
                        return Err(KnowledgeError::Invalid {
                            concept: constraint.clone(),
                            message: "has_constraint target defines no constraint".into(),
                        });
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn validate_rules(&self) -> Result<(), KnowledgeError> {
        for rule in &self.shift_rules {
            for s in [&rule.source, &rule.target] {
                if !self.is_declared(s) {
                    return Err(KnowledgeError::UnknownConcept(s.clone()));
                }
                Stage::from_name(s).ok_or_else(|| KnowledgeError::NotAStage(s.clone()))?;
            }
            if let Some(k) = rule.offset_gdd {
                if !(k >= 0.0) {
                    return Err(KnowledgeError::NegativeOffset(k));
                }
            }
        }
        for level in &self.levels {
            if !self.is_declared(&level.name) {
                return Err(KnowledgeError::UnknownConcept(level.name.clone()));
            }
            check_unit(&level.name, &level.unit)?;
        }
        Ok(())
    }

    fn check_operand(&self, op: &Operand) -> Result<(), KnowledgeError> {
        match op.concept() {
            Some(c) if !self.is_declared(c) => Err(KnowledgeError::UnknownConcept(c.to_string())),
            _ => Ok(()),
        }
    }

    pub fn is_declared(&self, name: &str) -> bool {
        PRIMARY_KINDS.contains(&name) || self.concepts.contains_key(name)
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty() && self.relations.is_empty()
    }

    pub fn concept(&self, name: &str) -> Option<&Concept> {
        self.concepts.get(name)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    /// `sub ≼ sup` under the reflexive-transitive closure.
    pub fn is_subconcept(&self, sub: &str, sup: &str) -> bool {
        if sub == sup {
            return true;
        }
        let mut stack = vec![sub];
        let mut seen = BTreeSet::new();
        while let Some(c) = stack.pop() {
            if let Some(ps) = self.parents.get(c) {
                for p in ps {
                    if p == sup {
                        return true;
                    }
                    if seen.insert(p.as_str()) {
                        stack.push(p);
                    }
                }
            }
        }
        false
    }

    /// All `c'` with `c' ≼ c`, including `c` itself.
    pub fn subconcepts(&self, c: &str) -> Result<BTreeSet<String>, KnowledgeError> {
        if !self.is_declared(c) {
            return Err(KnowledgeError::UnknownConcept(c.to_string()));
        }
        let mut out = BTreeSet::from([c.to_string()]);
        let mut stack = vec![c.to_string()];
        while let Some(x) = stack.pop() {
            if let Some(ks) = self.children.get(&x) {
                for k in ks {
                    if out.insert(k.clone()) {
                        stack.push(k.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Primary kinds a concept belongs to.
    pub fn kinds(&self, c: &str) -> Vec<&'static str> {
        PRIMARY_KINDS.iter().copied().filter(|p| self.is_subconcept(c, p)).collect()
    }

    /// Check every `is_before` relation against a calendar.
    pub fn check_temporal_order(&self, calendar: &PhenologyCalendar) -> OrderReport {
        let mut report = OrderReport::default();
        for r in &self.relations {
            let Relation::IsBefore { before, after } = r else { continue };
            let dated = |name: &str| Stage::from_name(name).and_then(|s| calendar.date(s));
            match (dated(before), dated(after)) {
                (Some(a), Some(b)) => {
                    if a >= b {
                        report.violations.push(OrderViolation {
                            before: before.clone(),
                            after: after.clone(),
                            before_date: a,
                            after_date: b,
                        });
                    }
                }
                _ => report.unverifiable.push((before.clone(), after.clone())),
            }
        }
        report.violations.sort_by(|x, y| (&x.before, &x.after).cmp(&(&y.before, &y.after)));
        report.violations.dedup();
        report.unverifiable.sort();
        report.unverifiable.dedup();
        report
    }

    /// Conditions attached to `subject` by `has_condition`.
    pub fn conditions_of(&self, subject: &str) -> Vec<(&str, &Condition)> {
        self.relations
            .iter()
            .filter_map(|r| match r {
                Relation::HasCondition { subject: s, condition } if s == subject => self
                    .concepts
                    .get(condition)
                    .and_then(|c| c.condition.as_ref())
                    .map(|c| (condition.as_str(), c)),
                _ => None,
            })
            .collect()
    }

    /// Constraints attached to `subject` by `has_constraint`.
    pub fn constraints_of(&self, subject: &str) -> Vec<(&str, &Constraint)> {
        self.relations
            .iter()
            .filter_map(|r| match r {
                Relation::HasConstraint { subject: s, constraint } if s == subject => self
                    .concepts
                    .get(constraint)
                    .and_then(|c| c.constraint.as_ref())
                    .map(|c| (constraint.as_str(), c)),
                _ => None,
            })
            .collect()
    }

    /// Conjunction of every condition and constraint attached to `subject`.
    pub fn check_subject(&self, subject: &str, bindings: &Bindings) -> Result<bool, KnowledgeError> {
        for (_, c) in self.conditions_of(subject) {
            if !c.evaluate(bindings)? {
                return Ok(false);
            }
        }
        for (_, c) in self.constraints_of(subject) {
            if !c.evaluate(subject, bindings)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Most specific level value: (region, variety) before variety-only,
    /// then region-only, then the generic entry.
    pub fn level(&self, name: &str, region: Option<&str>, variety: Option<&str>) -> Option<f64> {
        let score = |l: &Level| -> Option<u8> {
            let r = match (&l.region, region) {
                (None, _) => 0,
                (Some(a), Some(b)) if a == b => 1,
                _ => return None,
            };
            let v = match (&l.variety, variety) {
                (None, _) => 0,
                (Some(a), Some(b)) if a == b => 2,
                _ => return None,
            };
            Some(r + v)
        };
        self.levels
            .iter()
            .filter(|l| l.name == name)
            .filter_map(|l| score(l).map(|s| (s, l.value)))
            .max_by_key(|(s, _)| *s)
            .map(|(_, v)| v)
    }

    /// Resolve the shift rule producing `target`, preferring a
    /// variety-specific entry; `default_offset` fills rules without an offset.
    pub fn shift_rule_for(&self, target: Stage, variety: Option<&str>, default_offset: f64) -> Option<ShiftStageRule> {
        let candidates: Vec<&ShiftRuleDoc> = self
            .shift_rules
            .iter()
            .filter(|r| Stage::from_name(&r.target) == Some(target))
            .collect();
        let specific = candidates
            .iter()
            .find(|r| r.variety.is_some() && r.variety.as_deref() == variety);
        let generic = candidates.iter().find(|r| r.variety.is_none());
        let doc = specific.or(generic)?;
        Some(ShiftStageRule {
            source: Stage::from_name(&doc.source)?,
            target,
            offset_gdd: doc.offset_gdd.unwrap_or(default_offset),
            variety: doc.variety.clone(),
        })
    }
}

fn find_cycle(parents: &BTreeMap<String, BTreeSet<String>>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    fn visit(
        node: &str,
        parents: &BTreeMap<String, BTreeSet<String>>,
        marks: &mut BTreeMap<String, Mark>,
        path: &mut Vec<String>,
    ) -> Option<Vec<String>> {
        match marks.get(node) {
            Some(Mark::Done) => return None,
            Some(Mark::Active) => {
                let start = path.iter().position(|p| p == node).unwrap_or(0);
                let mut cycle = path[start..].to_vec();
                cycle.push(node.to_string());
                return Some(cycle);
            }
            None => {}
        }
        marks.insert(node.to_string(), Mark::Active);
        path.push(node.to_string());
        if let Some(ps) = parents.get(node) {
            for p in ps {
                if let Some(c) = visit(p, parents, marks, path) {
                    return Some(c);
                }
            }
        }
        path.pop();
        marks.insert(node.to_string(), Mark::Done);
        None
    }
    let mut marks = BTreeMap::new();
    for n in parents.keys() {
        let mut path = Vec::new();
        if let Some(c) = visit(n, parents, &mut marks, &mut path) {
            return Some(c);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderViolation {
    pub before: String,
    pub after: String,
    pub before_date: NaiveDate,
    pub after_date: NaiveDate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OrderReport {
    pub violations: Vec<OrderViolation>,
    /// `is_before` pairs where at least one stage has no date.
    pub unverifiable: Vec<(String, String)>,
}

impl OrderReport {
    pub fn is_consistent(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Date the target stage at the first day whose thermal time reaches the
/// source stage's thermal time plus the rule offset.
///
/// `gdd` is the cumulative thermal-time series as `(date, gdd_cum)` pairs in
/// date order.
pub fn apply_shift(
    rule: &ShiftStageRule,
    calendar: &PhenologyCalendar,
    gdd: &[(NaiveDate, f64)],
) -> Result<PhenologyCalendar, KnowledgeError> {
    if !(rule.offset_gdd >= 0.0) {
        return Err(KnowledgeError::NegativeOffset(rule.offset_gdd));
    }
    let source_date = calendar
        .date(rule.source)
        .ok_or(KnowledgeError::UndatedStage(rule.source))?;
    let start = gdd
        .binary_search_by_key(&source_date, |(d, _)| *d)
        .map_err(|_| KnowledgeError::SourceUncovered(source_date))?;
    let needed = gdd[start].1 + rule.offset_gdd;
    let (date, g) = gdd[start..]
        .iter()
        .find(|(_, g)| *g >= needed)
        .copied()
        .ok_or(KnowledgeError::GddExhausted {
            needed,
            available: gdd.last().map(|x| x.1).unwrap_or(0.0),
        })?;
    let mut out = calendar.clone();
    out.stages.insert(rule.target, StageDate { date, gdd_cum: Some(g) });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2012, m, d).unwrap()
    }

    fn kb(json: &str) -> Result<KnowledgeBase, KnowledgeError> {
        load_kb(json)
    }

    #[test]
    fn shipped_file_encodes_concept_hierarchy() {
        let kb = KnowledgeBase::shipped_default();
        assert!(kb.is_subconcept("VPD", "Meteorology"));
        assert!(kb.is_subconcept("Meteorology", "MVariable"));
        assert!(kb.is_subconcept("VPD", "Variable"));
        let vars = kb.subconcepts("Variable").unwrap();
        for c in ["MVariable", "CVariable", "Level", "Variable"] {
            assert!(vars.contains(c), "{c}");
        }
        // multiple subsumption: phenology is both measured and computed
        assert!(kb.subconcepts("MVariable").unwrap().contains("Phenology"));
        assert!(kb.subconcepts("CVariable").unwrap().contains("Phenology"));
        assert!(kb.subconcepts("CVariable").unwrap().contains("Bloom"));
        assert_eq!(kb.kinds("HeatSpikeLimit"), vec!["Constraint"]);
    }

    #[test]
    fn chain_loads() {
        let kb = kb(r#"{"concepts":[{"name":"MVariable"},{"name":"Meteorology"},{"name":"VPD","unit":"kPa"}],
            "relations":[{"kind":"subsumption","sub":"MVariable","sup":"Variable"},
                         {"kind":"subsumption","sub":"Meteorology","sup":"MVariable"},
                         {"kind":"subsumption","sub":"VPD","sup":"Meteorology"}]}"#)
        .unwrap();
        assert!(kb.is_subconcept("VPD", "MVariable"));
        assert!(!kb.is_subconcept("MVariable", "VPD"));
    }

    #[test]
    fn cycle_is_rejected_with_path() {
        let err = kb(r#"{"concepts":[{"name":"A"},{"name":"B"}],
            "relations":[{"kind":"subsumption","sub":"A","sup":"B"},{"kind":"subsumption","sub":"B","sup":"A"},
                         {"kind":"subsumption","sub":"A","sup":"Variable"}]}"#)
        .unwrap_err();
        match err {
            KnowledgeError::Cycle(path) => {
                assert_eq!(path.first(), path.last());
                assert!(path.contains(&"A".to_string()) && path.contains(&"B".to_string()));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_document_is_valid() {
        let kb = kb("{}").unwrap();
        assert!(kb.is_empty());
        assert_eq!(kb.subconcepts("Variable").unwrap().len(), 1);
    }

    #[test]
    fn load_errors() {
        assert_eq!(
            kb(r#"{"relations":[{"kind":"subsumption","sub":"Ghost","sup":"Variable"}]}"#).unwrap_err(),
            KnowledgeError::UnknownConcept("Ghost".into())
        );
        assert_eq!(
            kb(r#"{"concepts":[{"name":"Loose"}]}"#).unwrap_err(),
            KnowledgeError::Orphan("Loose".into())
        );
        assert!(matches!(
            kb(r#"{"concepts":[{"name":"X","unit":"furlong"}]}"#).unwrap_err(),
            KnowledgeError::UnknownUnit { .. }
        ));
        assert!(matches!(
            kb(r#"{"concepts":[{"name":"R","constraint":{"op":">=","operand":{"number":5},"restriction":{"op":"<=","operand":{"number":1}}}}],
                  "relations":[{"kind":"subsumption","sub":"R","sup":"Constraint"}]}"#)
            .unwrap_err(),
            KnowledgeError::Invalid { .. }
        ));
        assert!(matches!(kb("[1,2"), Err(KnowledgeError::Parse(_))));
    }

    #[test]
    fn subconcepts_of_leaf_is_itself() {
        let kb = KnowledgeBase::shipped_default();
        assert_eq!(kb.subconcepts("VPD").unwrap(), BTreeSet::from(["VPD".to_string()]));
        assert!(matches!(kb.subconcepts("Nope"), Err(KnowledgeError::UnknownConcept(_))));
    }

    fn full_calendar() -> PhenologyCalendar {
        PhenologyCalendar::new("p")
            .with(Stage::Budbreak, date(4, 5))
            .with(Stage::Bloom, date(6, 1))
            .with(Stage::Nouaison, date(6, 10))
            .with(Stage::Veraison, date(7, 25))
            .with(Stage::Maturity, date(9, 10))
            .with(Stage::Harvest, date(9, 20))
    }

    #[test]
    fn temporal_order() {
        let kb = KnowledgeBase::shipped_default();
        let ok = kb.check_temporal_order(&full_calendar());
        assert!(ok.is_consistent());
        assert!(ok.unverifiable.is_empty());

        let mut inverted = full_calendar();
        inverted.set(Stage::Veraison, date(5, 20), None);
        let rep = kb.check_temporal_order(&inverted);
        assert!(rep
            .violations
            .iter()
            .any(|v| v.before == "Bloom" && v.after == "Veraison"));

        let mut partial = full_calendar();
        partial.stages.remove(&Stage::Maturity);
        let rep = kb.check_temporal_order(&partial);
        assert!(rep.is_consistent());
        assert!(rep.unverifiable.iter().any(|(a, b)| a == "Veraison" && b == "Maturity"));
    }

    #[test]
    fn temporal_order_ignores_declaration_order() {
        let base = KnowledgeBase::shipped_default();
        let mut doc = KnowledgeDocument {
            concepts: base.concepts().cloned().collect(),
            relations: base.relations().to_vec(),
            ..Default::default()
        };
        doc.relations.reverse();
        let reversed = KnowledgeBase::from_document(doc).unwrap();
        let mut cal = full_calendar();
        cal.set(Stage::Bloom, date(8, 1), None);
        assert_eq!(base.check_temporal_order(&cal), reversed.check_temporal_order(&cal));
    }

    fn gdd_series(start_gdd: f64, per_day: f64, days: usize) -> Vec<(NaiveDate, f64)> {
        date(5, 1)
            .iter_days()
            .take(days)
            .enumerate()
            .map(|(i, d)| (d, start_gdd + per_day * i as f64))
            .collect()
    }

    fn bloom_rule(k: f64) -> ShiftStageRule {
        ShiftStageRule {
            source: Stage::Bloom,
            target: Stage::Nouaison,
            offset_gdd: k,
            variety: None,
        }
    }

    #[test]
    fn shift_examples() {
        let cal = PhenologyCalendar::new("p").with(Stage::Bloom, date(5, 11));
        // bloom sits at 300 + 10·10 = 400 GDD
        let g = gdd_series(300.0, 10.0, 60);
        let same = apply_shift(&bloom_rule(0.0), &cal, &g).unwrap();
        assert_eq!(same.date(Stage::Nouaison), Some(date(5, 11)));
        let five = apply_shift(&bloom_rule(50.0), &cal, &g).unwrap();
        assert_eq!(five.date(Stage::Nouaison), Some(date(5, 16)));
        assert_eq!(five.gdd(Stage::Nouaison), Some(450.0));
        assert!(matches!(
            apply_shift(&bloom_rule(5000.0), &cal, &g),
            Err(KnowledgeError::GddExhausted { .. })
        ));
    }

    #[test]
    fn evaluate_examples() {
        let mut b = Bindings::new();
        b.insert("VPD".into(), Value::Number(2.0));
        assert!(Constraint::new(CmpOp::Le, Operand::Number(3.5)).evaluate("VPD", &b).unwrap());

        b.insert("t".into(), Value::Date(date(4, 5)));
        b.insert("Budbreak".into(), Value::Date(date(4, 5)));
        b.insert("Veraison".into(), Value::Date(date(7, 25)));
        let cond = Condition {
            op: CmpOp::Ge,
            left: Operand::Concept("t".into()),
            right: Operand::Concept("Budbreak".into()),
        };
        assert!(cond.evaluate(&b).unwrap());

        let window = Constraint::between(Operand::Concept("Budbreak".into()), Operand::Concept("Veraison".into()));
        assert!(window.evaluate("t", &b).unwrap());
        b.insert("t".into(), Value::Date(date(8, 2)));
        assert!(!window.evaluate("t", &b).unwrap());

        assert_eq!(
            Constraint::new(CmpOp::Le, Operand::Concept("Limit".into())).evaluate("VPD", &b),
            Err(KnowledgeError::Unbound("Limit".into()))
        );
        assert!(matches!(
            Constraint::new(CmpOp::Le, Operand::Number(1.0)).evaluate("t", &b),
            Err(KnowledgeError::TypeMismatch(..))
        ));
    }

    #[test]
    fn attached_constraints_drive_subject_checks() {
        let kb = KnowledgeBase::shipped_default();
        let mut b = Bindings::new();
        b.insert("VPD".into(), Value::Number(3.0));
        b.insert("VpdLimit".into(), Value::Number(kb.level("VpdLimit", None, None).unwrap()));
        assert!(kb.check_subject("VPD", &b).unwrap());
        b.insert("VPD".into(), Value::Number(4.0));
        assert!(!kb.check_subject("VPD", &b).unwrap());
    }

    #[test]
    fn levels_prefer_specific_entries() {
        let kb = kb(r#"{"concepts":[{"name":"Level"},{"name":"Lwp","unit":"MPa"}],
            "relations":[{"kind":"subsumption","sub":"Level","sup":"Variable"},{"kind":"subsumption","sub":"Lwp","sup":"Level"}],
            "levels":[{"name":"Lwp","value":-0.3},{"name":"Lwp","value":-0.4,"variety":"Grenache"},
                      {"name":"Lwp","value":-0.5,"region":"Rhone","variety":"Grenache"},{"name":"Lwp","value":-0.2,"region":"Rhone"}]}"#)
        .unwrap();
        assert_eq!(kb.level("Lwp", None, None), Some(-0.3));
        assert_eq!(kb.level("Lwp", Some("Languedoc"), Some("Grenache")), Some(-0.4));
        assert_eq!(kb.level("Lwp", Some("Rhone"), Some("Grenache")), Some(-0.5));
        assert_eq!(kb.level("Lwp", Some("Rhone"), Some("Merlot")), Some(-0.2));
        assert_eq!(kb.level("Other", None, None), None);
    }

    #[test]
    fn shift_rule_resolution() {
        let kb = KnowledgeBase::shipped_default();
        let r = kb.shift_rule_for(Stage::Nouaison, Some("Merlot"), 60.0).unwrap();
        assert_eq!(r.source, Stage::Bloom);
        assert_eq!(r.offset_gdd, 60.0);
        assert!(kb.shift_rule_for(Stage::Harvest, None, 60.0).is_none());
    }

    fn random_dag(n: usize, edges: &[(usize, usize)]) -> KnowledgeDocument {
        let mut doc = KnowledgeDocument::default();
        for i in 0..n {
            doc.concepts.push(Concept {
                name: format!("C{i}"),
                unit: None,
                default: None,
                date: None,
                description: None,
                condition: None,
                constraint: None,
            });
            // every concept reaches a primary kind
            doc.relations.push(Relation::Subsumption {
                sub: format!("C{i}"),
                sup: "Variable".into(),
            });
        }
        for (a, b) in edges {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo != hi {
                doc.relations.push(Relation::Subsumption {
                    sub: format!("C{lo}"),
                    sup: format!("C{hi}"),
                });
            }
        }
        doc
    }

    proptest! {
        #[test]
        fn subsumption_is_a_partial_order(n in 2usize..12, edges in proptest::collection::vec((0usize..12, 0usize..12), 0..30)) {
            let edges: Vec<_> = edges.into_iter().filter(|(a, b)| *a < n && *b < n).collect();
            let kb = KnowledgeBase::from_document(random_dag(n, &edges)).unwrap();
            let names: Vec<String> = (0..n).map(|i| format!("C{i}")).collect();
            for a in &names {
                prop_assert!(kb.is_subconcept(a, a));
                for b in &names {
                    if a != b && kb.is_subconcept(a, b) {
                        prop_assert!(!kb.is_subconcept(b, a));
                    }
                    for c in &names {
                        if kb.is_subconcept(a, b) && kb.is_subconcept(b, c) {
                            prop_assert!(kb.is_subconcept(a, c));
                        }
                    }
                }
                let subs = kb.subconcepts(a).unwrap();
                for b in &names {
                    prop_assert_eq!(subs.contains(b), kb.is_subconcept(b, a));
                }
            }
        }

        #[test]
        fn shift_is_monotone_in_offset(k1 in 0.0f64..200.0, k2 in 0.0f64..200.0, incs in proptest::collection::vec(0.0f64..15.0, 60)) {
            let mut acc = 0.0;
            let g: Vec<_> = date(5, 1).iter_days().zip(&incs).map(|(d, x)| { acc += x; (d, acc) }).collect();
            let cal = PhenologyCalendar::new("p").with(Stage::Bloom, date(5, 3));
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            if let Ok(hi_cal) = apply_shift(&bloom_rule(hi), &cal, &g) {
                let lo_cal = apply_shift(&bloom_rule(lo), &cal, &g).unwrap();
                prop_assert!(lo_cal.date(Stage::Nouaison) <= hi_cal.date(Stage::Nouaison));
            }
        }
    }
}
