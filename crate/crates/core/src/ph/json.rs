//! `{"alpha":[...],"lambda":[...]}` and `{"alpha":[...],"A":[[...]]}`.
//! Numbers are written with 17 significant digits.

use nalgebra::DMatrix;
use serde::Deserialize;

use super::{CanonicalPH, GeneralPH, PhaseType};
use crate::fmt::f64_17;
use crate::Result;

fn list(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|&x| f64_17(x)).collect();
    format!("[{}]", items.join(","))
}

pub fn canonical_to_json(ph: &CanonicalPH) -> String {
    format!(
        "{{\"alpha\":{},\"lambda\":{}}}",
        list(ph.alpha()),
        list(ph.rates())
    )
}

pub fn general_to_json(ph: &GeneralPH) -> String {
    let a = ph.generator();
    let rows: Vec<String> = (0..a.nrows())
        .map(|i| list(&a.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    format!(
        "{{\"alpha\":{},\"A\":[{}]}}",
        list(ph.alpha()),
        rows.join(",")
    )
}

#[derive(Deserialize)]
struct CanonicalRepr {
    alpha: Vec<f64>,
    lambda: Vec<f64>,
}

#[derive(Deserialize)]
struct GeneralRepr {
    alpha: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
}

pub fn canonical_from_json(s: &str) -> Result<CanonicalPH> {
    let r: CanonicalRepr = serde_json::from_str(s)?;
    CanonicalPH::new(r.alpha, r.lambda)
}

pub fn general_from_json(s: &str) -> Result<GeneralPH> {
    let r: GeneralRepr = serde_json::from_str(s)?;
    let m = r.a.len();
    if r.a.iter().any(|row| row.len() != m) {
        return Err(crate::Error::Shape("A must be square".into()));
    }
    GeneralPH::new(r.alpha, DMatrix::from_fn(m, m, |i, j| r.a[i][j]))
}
