//! Central finite differences on selected coordinates.

#![allow(dead_code)]

/// `‖a - fd‖ / (‖a‖ + ‖fd‖ + 1e-12)` over `coords`, where `loss_at(i, h)`
/// evaluates the loss with coordinate `i` shifted by `h`.
pub fn rel_err(analytic: &[f64], coords: &[usize], h: f64, mut loss_at: impl FnMut(usize, f64) -> f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nf = 0.0;
    for &i in coords {
        let fd = (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h);
        diff += (analytic[i] - fd).powi(2);
        na += analytic[i].powi(2);
        nf += fd.powi(2);
    }
    diff.sqrt() / (na.sqrt() + nf.sqrt() + 1e-12)
}
