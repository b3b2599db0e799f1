//! MILP instances, bound refinements and the JSON instance format.
//!
//! Every constraint row is stored as `a·x <= b`. Rows written as `>=` or `=`
//! in a document are normalized while parsing.

use std::fmt;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

/// Tolerance for exact data checks such as objective recomputation.
pub const EPS_NUM: f64 = 1e-9;

/// One `a·x <= rhs` row, coefficients sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl Row {
    pub fn new(mut coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        coeffs.sort_by_key(|&(col, _)| col);
        Self { coeffs, rhs }
    }

    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }
}

/// `min c·x  s.t.  A x <= b,  l <= x <= u,  x_j integer for j in I`.
#[derive(Debug, Clone, PartialEq)]
pub struct MilpInstance {
    pub name: String,
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Ascending indices of integer-constrained variables.
    pub integer: Vec<usize>,
}

impl MilpInstance {
    pub fn num_cons(&self) -> usize {
        self.rows.len()
    }

    pub fn is_integer(&self, j: usize) -> bool {
        self.integer.binary_search(&j).is_ok()
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest row violation `max(0, a·x - b)` and bound violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let rows = self
            .rows
            .iter()
            .map(|r| r.activity(x) - r.rhs)
            .fold(0.0_f64, f64::max);
        let bounds = (0..self.num_vars)
            .map(|j| (self.lower[j] - x[j]).max(x[j] - self.upper[j]))
            .fold(0.0_f64, f64::max);
        rows.max(bounds)
    }

    /// Nonzero count of every column.
    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_vars];
        for row in &self.rows {
            for &(j, a) in &row.coeffs {
                if a != 0.0 {
                    counts[j] += 1;
                }
            }
        }
        counts
    }
}

/// Feasible point together with its objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub values: Vec<f64>,
    pub objective_value: f64,
}

impl Assignment {
    pub fn new(instance: &MilpInstance, values: Vec<f64>) -> Self {
        let objective_value = instance.objective_value(&values);
        Self {
            values,
            objective_value,
        }
    }

    pub fn is_consistent(&self, instance: &MilpInstance) -> bool {
        (instance.objective_value(&self.values) - self.objective_value).abs() <= EPS_NUM
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Direction {
    TightenUpper,
    TightenLower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundChange {
    pub var: usize,
    pub direction: Direction,
    pub value: f64,
}

impl BoundChange {
    pub fn upper(var: usize, value: f64) -> Self {
        Self {
            var,
            direction: Direction::TightenUpper,
            value,
        }
    }

    pub fn lower(var: usize, value: f64) -> Self {
        Self {
            var,
            direction: Direction::TightenLower,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LengthMismatch { field: &'static str, len: usize },
    NonFinite { field: &'static str, index: usize },
    BoundCrossing { var: usize },
    IntegerOutOfRange { var: usize },
    DuplicateInteger { var: usize },
    UnboundedInteger { var: usize },
    ColumnOutOfRange { row: usize, col: usize },
    DuplicateColumn { row: usize, col: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { field, len } => {
                write!(f, "{field} has length {len}, expected num_vars")
            }
            Violation::NonFinite { field, index } => {
                write!(f, "non-finite value in {field} at {index}")
            }
            Violation::BoundCrossing { var } => write!(f, "bound crossing at var {var}"),
            Violation::IntegerOutOfRange { var } => write!(f, "integer index {var} out of range"),
            Violation::DuplicateInteger { var } => write!(f, "duplicate integer index {var}"),
            Violation::UnboundedInteger { var } => write!(f, "unbounded integer var {var}"),
            Violation::ColumnOutOfRange { row, col } => {
                write!(f, "row {row} references column {col} out of range")
            }
            Violation::DuplicateColumn { row, col } => {
                write!(f, "row {row} repeats column {col}")
            }
        }
    }
}

/// Every invariant violation of `instance`; empty iff well-formed.
pub fn validate(instance: &MilpInstance) -> Vec<Violation> {
    let n = instance.num_vars;
    let mut out = Vec::new();
    for (field, len) in [
        ("objective", instance.objective.len()),
        ("lower", instance.lower.len()),
        ("upper", instance.upper.len()),
    ] {
        if len != n {
            out.push(Violation::LengthMismatch { field, len });
        }
    }
    if !out.is_empty() {
        return out;
    }
    for (j, c) in instance.objective.iter().enumerate() {
        if !c.is_finite() {
            out.push(Violation::NonFinite {
                field: "objective",
                index: j,
            });
        }
    }
    for j in 0..n {
        let (l, u) = (instance.lower[j], instance.upper[j]);
        if l.is_nan() || l == f64::INFINITY {
            out.push(Violation::NonFinite {
                field: "lower",
                index: j,
            });
        } else if u.is_nan() || u == f64::NEG_INFINITY {
            out.push(Violation::NonFinite {
                field: "upper",
                index: j,
            });
        } else if l > u {
            out.push(Violation::BoundCrossing { var: j });
        }
    }
    let mut seen = vec![false; n];
    for &j in &instance.integer {
        if j >= n {
            out.push(Violation::IntegerOutOfRange { var: j });
            continue;
        }
        if seen[j] {
            out.push(Violation::DuplicateInteger { var: j });
        }
        seen[j] = true;
        if !instance.lower[j].is_finite() || !instance.upper[j].is_finite() {
            out.push(Violation::UnboundedInteger { var: j });
        }
    }
    for (i, row) in instance.rows.iter().enumerate() {
        if !row.rhs.is_finite() {
            out.push(Violation::NonFinite {
                field: "rhs",
                index: i,
            });
        }
        let mut cols = Vec::with_capacity(row.coeffs.len());
        for &(col, a) in &row.coeffs {
            if col >= n {
                out.push(Violation::ColumnOutOfRange { row: i, col });
            }
            if !a.is_finite() {
                out.push(Violation::NonFinite {
                    field: "coeffs",
                    index: i,
                });
            }
            cols.push(col);
        }
        cols.sort_unstable();
        for w in cols.windows(2) {
            if w[0] == w[1] {
                out.push(Violation::DuplicateColumn { row: i, col: w[0] });
            }
        }
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum MilpError {
    #[error("variable index {var} out of range for {num_vars} variables")]
    IndexOutOfRange { var: usize, num_vars: usize },
    #[error("malformed instance document: {0}")]
    Malformed(String),
    #[error("instance schema violation: {0}")]
    Schema(String),
}

/// Child instance with one tightened bound. A change never widens a bound.
pub fn apply_bound_change(
    instance: &MilpInstance,
    change: BoundChange,
) -> Result<MilpInstance, MilpError> {
    let mut child = instance.clone();
    tighten(&mut child.lower, &mut child.upper, change)?;
    Ok(child)
}

/// Applies `change` to raw bound vectors.
pub fn tighten(lower: &mut [f64], upper: &mut [f64], change: BoundChange) -> Result<(), MilpError> {
    let j = change.var;
    if j >= lower.len() {
        return Err(MilpError::IndexOutOfRange {
            var: j,
            num_vars: lower.len(),
        });
    }
    match change.direction {
        Direction::TightenUpper => upper[j] = upper[j].min(change.value),
        Direction::TightenLower => lower[j] = lower[j].max(change.value),
    }
    Ok(())
}

#[derive(Serialize)]
struct RowDoc {
    coeffs: Vec<(usize, f64)>,
    rhs: f64,
}

#[derive(Serialize)]
#[serde(untagged)]
enum BoundDoc {
    Finite(f64),
    Infinite(&'static str),
}

impl BoundDoc {
    fn from(v: f64) -> Self {
        if v == f64::INFINITY {
            BoundDoc::Infinite("+inf")
        } else if v == f64::NEG_INFINITY {
            BoundDoc::Infinite("-inf")
        } else {
            BoundDoc::Finite(v)
        }
    }
}

#[derive(Serialize)]
struct InstanceDoc<'a> {
    name: &'a str,
    num_vars: usize,
    objective: &'a [f64],
    lower: Vec<BoundDoc>,
    upper: Vec<BoundDoc>,
    integer: &'a [usize],
    rows: Vec<RowDoc>,
}

/// Deterministic JSON encoding; keys in schema order, coefficients by column.
pub fn serialize_instance(instance: &MilpInstance) -> Vec<u8> {
    let doc = InstanceDoc {
        name: &instance.name,
        num_vars: instance.num_vars,
        objective: &instance.objective,
        lower: instance.lower.iter().map(|&v| BoundDoc::from(v)).collect(),
        upper: instance.upper.iter().map(|&v| BoundDoc::from(v)).collect(),
        integer: &instance.integer,
        rows: instance
            .rows
            .iter()
            .map(|r| {
                let mut coeffs = r.coeffs.clone();
                coeffs.sort_by_key(|&(c, _)| c);
                RowDoc { coeffs, rhs: r.rhs }
            })
            .collect(),
    };
    serde_json::to_vec(&doc).expect("instance document serializes")
}

fn schema(msg: impl Into<String>) -> MilpError {
    MilpError::Schema(msg.into())
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a Value, MilpError> {
    obj.get(key)
        .ok_or_else(|| schema(format!("missing field \"{key}\"")))
}

fn number(v: &Value, ctx: &str) -> Result<f64, MilpError> {
    // serde_json never yields NaN/Inf numbers; non-numbers are schema errors.
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| schema(format!("{ctx}: expected a finite number")))
}

fn index(v: &Value, ctx: &str) -> Result<usize, MilpError> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| schema(format!("{ctx}: expected a non-negative integer")))
}

fn bound(v: &Value, infinite: &str, ctx: &str) -> Result<f64, MilpError> {
    match v {
        Value::String(s) if s == infinite => Ok(if infinite == "+inf" {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }),
        Value::String(s) => Err(schema(format!("{ctx}: unexpected bound sentinel \"{s}\""))),
        other => number(other, ctx),
    }
}

fn array<'a>(v: &'a Value, ctx: &str) -> Result<&'a Vec<Value>, MilpError> {
    v.as_array()
        .ok_or_else(|| schema(format!("{ctx}: expected an array")))
}

/// Parses the JSON instance format. Rows may carry an optional `"sense"` of
/// `"<="`, `">="` or `"="`; they are normalized to `<=` rows.
pub fn parse_instance(bytes: &[u8]) -> Result<MilpInstance, MilpError> {
    let doc: Value =
        serde_json::from_slice(bytes).map_err(|e| MilpError::Malformed(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| schema("top level must be an object"))?;
    let name = field(obj, "name")?
        .as_str()
        .ok_or_else(|| schema("name: expected a string"))?
        .to_string();
    let num_vars = index(field(obj, "num_vars")?, "num_vars")?;
    let objective = array(field(obj, "objective")?, "objective")?
        .iter()
        .map(|v| number(v, "objective"))
        .collect::<Result<Vec<_>, _>>()?;
    let lower = array(field(obj, "lower")?, "lower")?
        .iter()
        .map(|v| bound(v, "-inf", "lower"))
        .collect::<Result<Vec<_>, _>>()?;
    let upper = array(field(obj, "upper")?, "upper")?
        .iter()
        .map(|v| bound(v, "+inf", "upper"))
        .collect::<Result<Vec<_>, _>>()?;
    let mut integer = array(field(obj, "integer")?, "integer")?
        .iter()
        .map(|v| index(v, "integer"))
        .collect::<Result<Vec<_>, _>>()?;
    integer.sort_unstable();
    for (key, len) in [
        ("objective", objective.len()),
        ("lower", lower.len()),
        ("upper", upper.len()),
    ] {
        if len != num_vars {
            return Err(schema(format!("{key} has {len} entries, num_vars is {num_vars}")));
        }
    }

    let mut rows = Vec::new();
    for (i, row) in array(field(obj, "rows")?, "rows")?.iter().enumerate() {
        let row = row
            .as_object()
            .ok_or_else(|| schema(format!("rows[{i}]: expected an object")))?;
        let mut coeffs = Vec::new();
        for pair in array(field(row, "coeffs")?, "coeffs")? {
            let pair = array(pair, "coeffs entry")?;
            if pair.len() != 2 {
                return Err(schema(format!("rows[{i}]: coefficient pairs have two entries")));
            }
            let col = index(&pair[0], "column")?;
            if col >= num_vars {
                return Err(schema(format!("rows[{i}]: column {col} out of range")));
            }
            coeffs.push((col, number(&pair[1], "coefficient")?));
        }
        let rhs = number(field(row, "rhs")?, "rhs")?;
        let sense = match row.get("sense") {
            None => "<=",
            Some(v) => v
                .as_str()
                .ok_or_else(|| schema(format!("rows[{i}]: sense must be a string")))?,
        };
        match sense {
            "<=" => rows.push(Row::new(coeffs, rhs)),
            ">=" => rows.push(Row::new(
                coeffs.into_iter().map(|(c, a)| (c, -a)).collect(),
                -rhs,
            )),
            "=" => {
                rows.push(Row::new(coeffs.clone(), rhs));
                rows.push(Row::new(
                    coeffs.into_iter().map(|(c, a)| (c, -a)).collect(),
                    -rhs,
                ));
            }
            other => return Err(schema(format!("rows[{i}]: unknown sense \"{other}\""))),
        }
    }

    let instance = MilpInstance {
        name,
        num_vars,
        objective,
        rows,
        lower,
        upper,
        integer,
    };
    if let Some(v) = validate(&instance).first() {
        return Err(schema(v.to_string()));
    }
    Ok(instance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn knapsack() -> MilpInstance {
        MilpInstance {
            name: "knap3".into(),
            num_vars: 3,
            objective: vec![-5.0, -4.0, -3.0],
            rows: vec![Row::new(vec![(2, 1.0), (0, 2.0), (1, 3.0)], 5.0)],
            lower: vec![0.0; 3],
            upper: vec![1.0; 3],
            integer: vec![0, 1, 2],
        }
    }

    #[test]
    fn crossing_bounds_reported() {
        let mut inst = knapsack();
        inst.lower[0] = 3.0;
        inst.upper[0] = 1.0;
        let msgs: Vec<String> = validate(&inst).iter().map(|v| v.to_string()).collect();
        assert_eq!(msgs, vec!["bound crossing at var 0"]);
    }

    #[test]
    fn box_only_instance_is_valid() {
        let mut inst = knapsack();
        inst.rows.clear();
        assert!(validate(&inst).is_empty());
    }

    #[test]
    fn unbounded_integer_reported() {
        let mut inst = knapsack();
        inst.upper[2] = f64::INFINITY;
        let v = validate(&inst);
        assert_eq!(v, vec![Violation::UnboundedInteger { var: 2 }]);
        assert!(v[0].to_string().starts_with("unbounded integer var"));
    }

    #[test]
    fn duplicate_columns_reported() {
        let mut inst = knapsack();
        inst.rows[0].coeffs.push((1, 1.0));
        assert!(validate(&inst).contains(&Violation::DuplicateColumn { row: 0, col: 1 }));
    }

    #[test]
    fn floor_and_ceil_children() {
        let mut inst = knapsack();
        inst.upper[2] = 5.0;
        let x_hat: f64 = 2.5;
        let minus = apply_bound_change(&inst, BoundChange::upper(2, x_hat.floor())).unwrap();
        let plus = apply_bound_change(&inst, BoundChange::lower(2, x_hat.ceil())).unwrap();
        assert_eq!(minus.upper[2], 2.0);
        assert_eq!(plus.lower[2], 3.0);
        assert_eq!(inst.upper[2], 5.0);
        let same = apply_bound_change(&inst, BoundChange::upper(2, 5.0)).unwrap();
        assert_eq!(same, inst);
    }

    #[test]
    fn bound_change_rejects_bad_index() {
        assert_eq!(
            apply_bound_change(&knapsack(), BoundChange::upper(7, 0.0)),
            Err(MilpError::IndexOutOfRange {
                var: 7,
                num_vars: 3
            })
        );
    }

    #[test]
    fn knapsack_round_trip() {
        let inst = knapsack();
        let back = parse_instance(&serialize_instance(&inst)).unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn serialized_key_order_is_fixed() {
        let text = String::from_utf8(serialize_instance(&knapsack())).unwrap();
        assert_eq!(
            text,
            r#"{"name":"knap3","num_vars":3,"objective":[-5.0,-4.0,-3.0],"lower":[0.0,0.0,0.0],"upper":[1.0,1.0,1.0],"integer":[0,1,2],"rows":[{"coeffs":[[0,2.0],[1,3.0],[2,1.0]],"rhs":5.0}]}"#
        );
    }

    #[test]
    fn missing_rhs_is_schema_error() {
        let doc = br#"{"name":"x","num_vars":1,"objective":[1],"lower":[0],"upper":[1],"integer":[],"rows":[{"coeffs":[[0,1]]}]}"#;
        assert!(matches!(parse_instance(doc), Err(MilpError::Schema(_))));
    }

    #[test]
    fn nan_coefficient_is_schema_error() {
        let doc = br#"{"name":"x","num_vars":1,"objective":[1],"lower":[0],"upper":[1],"integer":[],"rows":[{"coeffs":[[0,"NaN"]],"rhs":1}]}"#;
        assert!(matches!(parse_instance(doc), Err(MilpError::Schema(_))));
        // A bare NaN token is not JSON at all.
        let doc = br#"{"name":"x","num_vars":1,"objective":[NaN],"lower":[0],"upper":[1],"integer":[],"rows":[]}"#;
        assert!(matches!(parse_instance(doc), Err(MilpError::Malformed(_))));
    }

    #[test]
    fn truncated_document_is_malformed() {
        assert!(matches!(
            parse_instance(br#"{"name": "x", "num_"#),
            Err(MilpError::Malformed(_))
        ));
    }

    #[test]
    fn infinite_bounds_use_sentinels() {
        let mut inst = knapsack();
        inst.integer = vec![0, 1];
        inst.lower[2] = f64::NEG_INFINITY;
        inst.upper[2] = f64::INFINITY;
        let text = String::from_utf8(serialize_instance(&inst)).unwrap();
        assert!(text.contains(r#""lower":[0.0,0.0,"-inf"]"#));
        assert!(text.contains(r#""upper":[1.0,1.0,"+inf"]"#));
        assert_eq!(parse_instance(text.as_bytes()).unwrap(), inst);
    }

    #[test]
    fn ge_and_eq_rows_are_normalized() {
        let doc = br#"{"name":"x","num_vars":2,"objective":[1,1],"lower":[0,0],"upper":[4,4],"integer":[0],
            "rows":[{"coeffs":[[1,2],[0,1]],"rhs":3,"sense":">="},{"coeffs":[[0,1]],"rhs":2,"sense":"="}]}"#;
        let inst = parse_instance(doc).unwrap();
        assert_eq!(inst.rows.len(), 3);
        assert_eq!(inst.rows[0], Row::new(vec![(0, -1.0), (1, -2.0)], -3.0));
        assert_eq!(inst.rows[1], Row::new(vec![(0, 1.0)], 2.0));
        assert_eq!(inst.rows[2], Row::new(vec![(0, -1.0)], -2.0));
    }

    fn arb_instance() -> impl Strategy<Value = MilpInstance> {
        (1usize..6, 0usize..4).prop_flat_map(|(n, m)| {
            let bounds = prop::collection::vec((-50.0f64..50.0, 0.0f64..20.0, any::<bool>()), n);
            let rows = prop::collection::vec(
                (prop::collection::btree_map(0..n, -1e3f64..1e3, 0..=n), -1e4f64..1e4),
                m,
            );
            (
                prop::collection::vec(-1e6f64..1e6, n),
                bounds,
                rows,
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_map(move |(objective, bounds, rows, is_int)| {
                    let lower: Vec<f64> = bounds
                        .iter()
                        .map(|&(l, _, inf)| if inf { f64::NEG_INFINITY } else { l })
                        .collect();
                    let upper: Vec<f64> = bounds
                        .iter()
                        .map(|&(l, w, inf)| if inf { f64::INFINITY } else { l + w })
                        .collect();
                    let integer = (0..n).filter(|&j| is_int[j] && lower[j].is_finite()).collect();
                    MilpInstance {
                        name: "prop".into(),
                        num_vars: n,
                        objective,
                        rows: rows
                            .into_iter()
                            .map(|(c, b)| Row::new(c.into_iter().collect(), b))
                            .collect(),
                        lower,
                        upper,
                        integer,
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(inst in arb_instance()) {
            prop_assert!(validate(&inst).is_empty());
            let back = parse_instance(&serialize_instance(&inst)).unwrap();
            prop_assert_eq!(back, inst);
        }

        #[test]
        fn bound_changes_only_tighten(inst in arb_instance(), var in 0usize..6, value in -60.0f64..60.0, up in any::<bool>()) {
            let var = var % inst.num_vars;
            let change = if up { BoundChange::upper(var, value) } else { BoundChange::lower(var, value) };
            let child = apply_bound_change(&inst, change).unwrap();
            for j in 0..inst.num_vars {
                prop_assert!(child.lower[j] >= inst.lower[j]);
                prop_assert!(child.upper[j] <= inst.upper[j]);
                if j != var {
                    prop_assert_eq!(child.lower[j], inst.lower[j]);
                    prop_assert_eq!(child.upper[j], inst.upper[j]);
                }
            }
        }
    }
}
