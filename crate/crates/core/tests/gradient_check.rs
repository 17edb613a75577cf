use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpc_core::losses::{grad_video, loss_video, LossWeights};
use vpc_core::{Direction, FlowField, Mask};

const H: f64 = 1e-4;
const SIZE: usize = 8;

struct Instance {
    flows: Vec<FlowField>,
    pseudo: Vec<FlowField>,
    masks: Vec<Mask>,
    fwd: Vec<FlowField>,
    weights: LossWeights,
}

fn smooth_field(rng: &mut ChaCha8Rng, dir: Direction, amp: f64) -> FlowField {
    let c: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let phase = rng.random_range(0.0..6.0);
    FlowField::from_fn(SIZE, SIZE, dir, |x, y| {
        let (x, y) = (x as f64, y as f64);
        (
            amp * (c[0] + 0.15 * c[1] * x + 0.1 * (0.7 * y + phase).sin()),
            amp * (c[3] + 0.15 * c[4] * y + 0.1 * c[5] * (0.5 * x - phase).cos()),
        )
    })
    .unwrap()
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let pseudo: Vec<FlowField> = (0..n)
        .map(|_| smooth_field(&mut rng, Direction::Backward, 1.5))
        .collect();
    let flows = pseudo
        .iter()
        .map(|p| {
            FlowField::from_fn(SIZE, SIZE, Direction::Backward, |x, y| {
                let (u, v) = p.get(x, y);
                (u + rng.random_range(-0.6..0.6), v + rng.random_range(-0.6..0.6))
            })
            .unwrap()
        })
        .collect();
    let fwd = (0..n - 1)
        .map(|_| smooth_field(&mut rng, Direction::Forward, 1.0))
        .collect();
    let masks = (0..n)
        .map(|_| {
            let (x0, y0) = (rng.random_range(0..3), rng.random_range(0..3));
            Mask::from_fn(SIZE, SIZE, |x, y| x >= x0 && y >= y0 && x < x0 + 5 && y < y0 + 5).unwrap()
        })
        .collect();
    let weights = LossWeights {
        lambda_temporal: rng.random_range(0.5..10.0),
        mu_mask: rng.random_range(0.1..2.0),
        ..LossWeights::default()
    };
    Instance {
        flows,
        pseudo,
        masks,
        fwd,
        weights,
    }
}

fn perturbed(flows: &[FlowField], frame: usize, channel: usize, idx: usize, delta: f64) -> Vec<FlowField> {
    let mut out = flows.to_vec();
    let f = &flows[frame];
    let w = f.width();
    let target = (idx % w, idx / w);
    out[frame] = FlowField::from_fn(f.height(), f.width(), Direction::Backward, |x, y| {
        let (mut u, mut v) = f.get(x, y);
        if (x, y) == target {
            if channel == 0 {
                u += delta;
            } else {
                v += delta;
            }
        }
        (u, v)
    })
    .unwrap();
    out
}

/// Central differences at `h`, plus a flag set when halving `h` changes any
/// component noticeably (a kink of the piecewise-smooth loss lies within reach).
fn finite_difference(inst: &Instance) -> (Vec<f64>, bool) {
    let loss = |flows: &[FlowField]| {
        loss_video(flows, &inst.pseudo, &inst.masks, &inst.fwd, &inst.weights)
            .unwrap()
            .total
    };
    let mut out = Vec::new();
    let mut kinked = false;
    for frame in 0..inst.flows.len() {
        for channel in 0..2 {
            for idx in 0..SIZE * SIZE {
                let d = |h: f64| {
                    (loss(&perturbed(&inst.flows, frame, channel, idx, h))
                        - loss(&perturbed(&inst.flows, frame, channel, idx, -h)))
                        / (2.0 * h)
                };
                let full = d(H);
                let half = d(H / 2.0);
                if (full - half).abs() > 1e-7 * (1.0 + full.abs()) {
                    kinked = true;
                }
                out.push(full);
            }
        }
    }
    (out, kinked)
}

fn flatten(grads: &[FlowField]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.u().data().iter().chain(g.v().data()).copied().collect::<Vec<_>>())
        .collect()
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut checked = 0;
    let mut rejected = 0;
    let mut seed = 0;
    while checked < 20 {
        let inst = instance(seed);
        seed += 1;
        let (fd, kinked) = finite_difference(&inst);
        if kinked {
            rejected += 1;
            continue;
        }
        let an = flatten(&grad_video(&inst.flows, &inst.pseudo, &inst.masks, &inst.fwd, &inst.weights).unwrap());
        let diff: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / norm;
        assert!(rel < 1e-4, "seed {}: relative error {rel}", seed - 1);
        checked += 1;
    }
    eprintln!("{checked} instances checked, {rejected} rejected as near a kink");
    assert!(rejected <= 20);
}
