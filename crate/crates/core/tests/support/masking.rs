//! Pinned-gate supernet forward versus a discrete network built from the
//! copied subset weights.

#![allow(dead_code)]

use rand::Rng;
use spnas::superkernel::{Decision, IndicatorConfig};
use spnas::supernet::{build_discrete, build_supernet, DerivedArchitecture, GatePlan, MacroConfig, Supernet, WeightSource};
use spnas::tensor::{ParamKind, Tape, Tensor};
use spnas::{seeded_rng, Rng as SpRng};

/// Random affine parameters so that biases are nonzero and the gating has
/// something to cancel.
pub fn perturb_affine(sn: &mut Supernet, rng: &mut SpRng) {
    let ids: Vec<_> = sn.store.ids().filter(|&id| sn.store.kind(id) == ParamKind::Affine).collect();
    for id in ids {
        for v in sn.store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..1.5);
        }
    }
}

pub fn random_input(cfg: &MacroConfig, n: usize, rng: &mut SpRng) -> Tensor {
    let r = cfg.input_resolution;
    Tensor::from_fn(&[n, cfg.input_channels, r, r], |_| rng.random_range(0.0..1.0))
}

/// Decision vector applying `d` wherever legal and cycling through MBConv
/// candidates elsewhere.
pub fn decisions_for(cfg: &MacroConfig, d: Decision) -> Vec<Decision> {
    cfg.layers()
        .iter()
        .map(|l| {
            if d.is_skip() && !l.skip_allowed {
                Decision::ALL[1 + l.index % 4]
            } else {
                d
            }
        })
        .collect()
}

pub fn max_diff(cfg: &MacroConfig, decisions: Vec<Decision>, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut sn = build_supernet(cfg, IndicatorConfig::default(), &mut rng).unwrap();
    perturb_affine(&mut sn, &mut rng);
    let x = random_input(cfg, 2, &mut rng);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pass = sn.forward(&mut tape, xv, GatePlan::Pinned(&decisions), &[]).unwrap();
    let a = tape.value(pass.logits).clone();

    let arch = DerivedArchitecture::new(cfg.clone(), decisions).unwrap();
    let net = build_discrete(&arch, WeightSource::Supernet(&sn)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = net.forward(&mut tape, xv, Default::default()).unwrap();
    a.max_abs_diff(tape.value(out))
}

