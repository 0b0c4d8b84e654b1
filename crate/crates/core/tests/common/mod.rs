//! Independent reference implementations used by the acceptance checks.

#![allow(dead_code)]

use neunet::autograd::{Graph, Var};
use neunet::{LabelVolume, Volume4};
use rand::Rng;

pub fn random_volume(rng: &mut impl Rng, shape: [usize; 4]) -> Volume4<f64> {
    Volume4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_volume_f32(rng: &mut impl Rng, shape: [usize; 4]) -> Volume4<f32> {
    Volume4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0f32..1.0))
}

pub fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Direct scatter form of a strided transposed convolution: every input
/// voxel adds its kernel footprint into the output, then `pad` voxels are
/// dropped from the low end of each axis.
pub fn scatter_transposed(
    x: &Volume4<f64>,
    w: &[f64],
    out_c: usize,
    in_c: usize,
    size: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Volume4<f64> {
    // `w` is laid out [out_c][in_c][ka][kb][kc]; x has out_c channels and
    // the result has in_c channels.
    let s = x.spatial();
    let full: [usize; 3] = std::array::from_fn(|a| (s[a] - 1) * stride[a] + size[a]);
    let mut y = Volume4::<f64>::zeros([full[0], full[1], full[2], in_c]);
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                for o in 0..out_c {
                    let v = x.get(i, j, k, o);
                    for c in 0..in_c {
                        for a in 0..size[0] {
                            for b in 0..size[1] {
                                for e in 0..size[2] {
                                    let idx = (((o * in_c + c) * size[0] + a) * size[1] + b) * size[2] + e;
                                    let (p, q, r) = (i * stride[0] + a, j * stride[1] + b, k * stride[2] + e);
                                    let cur = y.get(p, q, r, c);
                                    y.set(p, q, r, c, cur + v * w[idx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let out: [usize; 3] = std::array::from_fn(|a| full[a] - 2 * pad[a]);
    y.crop(pad, out).unwrap()
}

/// Surface voxels by exhaustive neighbour inspection.
pub fn brute_surface(m: &LabelVolume, class: u32) -> Vec<[i64; 3]> {
    let s = m.shape().map(|v| v as i64);
    let is = |p: [i64; 3]| {
        (0..3).all(|a| p[a] >= 0 && p[a] < s[a]) && m.get(p[0] as usize, p[1] as usize, p[2] as usize) == class
    };
    let mut out = Vec::new();
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let p = [i, j, k];
                if !is(p) {
                    continue;
                }
                let mut boundary = false;
                for a in 0..3 {
                    for d in [-1, 1] {
                        let mut q = p;
                        q[a] += d;
                        boundary |= !is(q);
                    }
                }
                if boundary {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// All-pairs directed nearest distances followed by the interpolated 95th
/// percentile, symmetrised by the maximum.
pub fn brute_hd95(a: &[[i64; 3]], b: &[[i64; 3]], spacing: [f64; 3]) -> f64 {
    let dist = |p: [i64; 3], q: [i64; 3]| {
        let d: Vec<f64> = (0..3).map(|x| (p[x] - q[x]) as f64 * spacing[x]).collect();
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    };
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect();
        d.sort_by(f64::total_cmp);
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(d.len() - 1);
        d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
    };
    directed(a, b).max(directed(b, a))
}

/// Builds a scalar-valued graph from its inputs; returns the input nodes
/// and the output node.
pub type GraphFn<'a> = dyn Fn(&mut Graph<f64>, &[Volume4<f64>]) -> (Vec<Var>, Var) + 'a;

/// Largest relative error between reverse-mode gradients and central
/// differences over every element of every input.
pub fn gradient_error(f: &GraphFn, inputs: &[Volume4<f64>], h: f64) -> f64 {
    let mut g = Graph::new();
    let (vars, out) = f(&mut g, inputs);
    let grads = g.backward(out).unwrap();
    let eval = |xs: &[Volume4<f64>]| {
        let mut g = Graph::new();
        let (_, out) = f(&mut g, xs);
        g.value(out).data()[0]
    };
    let mut worst = 0.0f64;
    for (n, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().data().to_vec();
        for i in 0..inputs[n].len() {
            let mut plus = inputs.to_vec();
            plus[n].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[n].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i];
            // the floor keeps vanishing gradients from dividing by zero
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
