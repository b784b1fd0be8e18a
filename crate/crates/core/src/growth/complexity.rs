//! Operator parameter counts for growing `(D₁, B₁, L₁)` to `(D₂, B₂, L₂)`.

/// `2·R·D₁·D₂ + R²·(B₁·B₂ + L₁·L₂)`.
///
/// This is the closed form for rank `R`; it agrees with the number of
/// stored core entries ([`super::MangoCores`] with all ranks `R`,
/// `R²·(B₁B₂ + 2D₁D₂ + L₁L₂)`) at `R = 1`.
pub fn param_count_mango(d1: u64, d2: u64, b1: u64, b2: u64, l1: u64, l2: u64, r: u64) -> u64 {
    2 * r * d1 * d2 + r * r * (b1 * b2 + l1 * l2)
}

/// `2·B₁·D₁·D₂ + L₁·L₂`.
pub fn param_count_ligo(d1: u64, d2: u64, b1: u64, _b2: u64, l1: u64, l2: u64) -> u64 {
    2 * b1 * d1 * d2 + l1 * l2
}

/// `2·L₁·D₁·D₂ + L₁·L₂`.
pub fn param_count_bert2bert(d1: u64, d2: u64, _b1: u64, _b2: u64, l1: u64, l2: u64) -> u64 {
    2 * l1 * d1 * d2 + l1 * l2
}
