/// Scientific notation with 17 significant digits; enough to round-trip any f64.
pub(crate) fn f64_17(x: f64) -> String {
    format!("{x:.16e}")
}
