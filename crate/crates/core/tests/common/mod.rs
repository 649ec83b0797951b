#![allow(dead_code)]

use evssl::event::{Event, EventStream, Polarity};
use evssl::rng::SeededRng;
use rand::Rng;

/// Uniform random events, sorted by time.
pub fn random_stream(rng: &mut SeededRng, max_side: u32, max_events: usize) -> EventStream {
    let w = rng.random_range(1..=max_side);
    let h = rng.random_range(1..=max_side);
    let n = rng.random_range(0..=max_events);
    let mut ts: Vec<u32> = (0..n).map(|_| rng.random_range(0..1_000_000)).collect();
    ts.sort_unstable();
    let events = ts
        .into_iter()
        .map(|t| {
            Event::new(
                rng.random_range(0..w) as u16,
                rng.random_range(0..h) as u16,
                t,
                if rng.random() { Polarity::Positive } else { Polarity::Negative },
            )
        })
        .collect();
    EventStream::new(w, h, events).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(a: &[f64]) -> Vec<f64> {
    let n = dot(a, a).sqrt();
    a.iter().map(|x| x / n).collect()
}

/// `-ln( e^{q·k_pos/τ} / Σ_j e^{q·k_j/τ} )` without any stabilization.
pub fn naive_nce(q: &[f64], keys: &[Vec<f64>], pos: usize, tau: f64) -> f64 {
    let num = (dot(q, &keys[pos]) / tau).exp();
    let den: f64 = keys.iter().map(|k| (dot(q, k) / tau).exp()).sum();
    -(num / den).ln()
}

pub fn naive_zeta(v1: &[f64], v2: &[f64]) -> Vec<f64> {
    let s = dot(v1, v2);
    let n = dot(v2, v2).sqrt();
    v2.iter().map(|x| s * x / n).collect()
}

pub fn naive_scores(m: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    let u: Vec<Vec<f64>> = m.iter().map(|r| unit(r)).collect();
    u.iter()
        .map(|a| {
            let e: Vec<f64> = u.iter().map(|b| (dot(a, b) / tau).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

pub fn naive_kl(sq: &[Vec<f64>], sy: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for (rq, ry) in sq.iter().zip(sy) {
        for (a, b) in rq.iter().zip(ry) {
            acc += a * (a / b).ln();
        }
    }
    acc
}

pub fn naive_l_evt(q: &[Vec<f64>], k: &[Vec<f64>], y: &[Vec<f64>], tau: f64) -> f64 {
    let zq: Vec<Vec<f64>> = q.iter().zip(y).map(|(a, b)| naive_zeta(&unit(a), b)).collect();
    let zk: Vec<Vec<f64>> = k.iter().zip(y).map(|(a, b)| naive_zeta(&unit(a), b)).collect();
    (0..q.len()).map(|i| naive_nce(&zq[i], &zk, i, tau)).sum::<f64>() / q.len() as f64
}

pub fn naive_l_rgb(qi: &[Vec<f64>], y: &[Vec<f64>], tau: f64) -> f64 {
    (0..qi.len()).map(|i| naive_nce(&unit(&qi[i]), y, i, tau)).sum::<f64>() / qi.len() as f64
}

pub fn naive_total(q: &[Vec<f64>], k: &[Vec<f64>], qi: &[Vec<f64>], y: &[Vec<f64>], tau: f64, lambda1: f64) -> f64 {
    naive_l_evt(q, k, y, tau)
        + naive_l_rgb(qi, y, tau)
        + lambda1 * naive_kl(&naive_scores(qi, tau), &naive_scores(y, tau))
}

pub fn rows(data: &[f64], cols: usize) -> Vec<Vec<f64>> {
    data.chunks(cols).map(|c| c.to_vec()).collect()
}
