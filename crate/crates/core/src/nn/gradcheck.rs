//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

fn eval(ps: &ParamStore, build: &impl Fn(&mut Tape) -> Var) -> f64 {
    let mut t = Tape::new(ps);
    let root = build(&mut t);
    t.value(root).data[0]
}

/// Relative error ‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖) over the given
/// coordinates (parameter, flat index).
fn compare(ps: &ParamStore, build: &impl Fn(&mut Tape) -> Var, h: f64, coords: &[(ParamId, usize)]) -> f64 {
    let mut t = Tape::new(ps);
    let root = build(&mut t);
    let grads = t.backward(root).expect("scalar root");
    let mut work = ps.clone();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for &(id, j) in coords {
        let orig = work.get(id).data[j];
        work.get_mut(id).data[j] = orig + h;
        let up = eval(&work, build);
        work.get_mut(id).data[j] = orig - h;
        let down = eval(&work, build);
        work.get_mut(id).data[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).data[j];
        diff += (analytic - numeric).powi(2);
        na += analytic * analytic;
        nn += numeric * numeric;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Check every parameter coordinate.
pub fn check_gradients(ps: &ParamStore, build: impl Fn(&mut Tape) -> Var, h: f64) -> f64 {
    let coords: Vec<(ParamId, usize)> = ps
        .ids()
        .flat_map(|id| (0..ps.get(id).len()).map(move |j| (id, j)))
        .collect();
    compare(ps, &build, h, &coords)
}

/// Check a random sample of at most `max_coords` coordinates, always
/// including at least one from every parameter tensor.
pub fn check_gradients_sampled<R: Rng + ?Sized>(
    ps: &ParamStore,
    build: impl Fn(&mut Tape) -> Var,
    h: f64,
    max_coords: usize,
    rng: &mut R,
) -> f64 {
    let all: Vec<(ParamId, usize)> = ps
        .ids()
        .flat_map(|id| (0..ps.get(id).len()).map(move |j| (id, j)))
        .collect();
    let mut coords: Vec<(ParamId, usize)> = ps
        .ids()
        .filter(|&id| !ps.get(id).is_empty())
        .map(|id| (id, rng.random_range(0..ps.get(id).len())))
        .collect();
    let extra = max_coords.saturating_sub(coords.len()).min(all.len());
    coords.extend(sample(rng, all.len(), extra).into_iter().map(|i| all[i]));
    compare(ps, &build, h, &coords)
}
