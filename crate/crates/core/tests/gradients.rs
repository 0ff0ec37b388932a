//! Gradient-correctness tests below the acceptance tier: the random MLP
//! finite-difference example and a fast per-mode smoke pass.

mod common;

use common::pipeline_check;
use voplab_core::gradcheck::{grad_check, CheckConfig, EvalOutput};
use voplab_core::protocols::ProtocolKind;
use voplab_core::scalar::Scalar;
use voplab_core::tape::Tape;
use voplab_core::Result;

/// Two-layer MLP whose loss is a strong linear readout, so every
/// coordinate's gradient dominates the rounding noise of an f32 central
/// difference at step 1e-4.
fn mlp_loss<S: Scalar>(p: &voplab_core::ParamRegistry<S>, want: bool) -> Result<EvalOutput<S>> {
    use voplab_core::params::Binder;
    use voplab_core::Tensor;
    let batch = 1usize;
    let (d_in, d_h, d_out) = (5usize, 8usize, 4usize);
    // Inputs bounded away from zero so first-layer gradients stay large.
    let x: Vec<f64> = (0..batch * d_in)
        .map(|i| {
            let mag = 0.7 + 0.15 * ((i * 29 % 5) as f64);
            if i % 2 == 0 { mag } else { -mag }
        })
        .collect();
    let readout: Vec<f64> = (0..batch * d_out)
        .map(|i| {
            let v = 12.0 + 4.5 * ((i * 53 % 5) as f64);
            if i % 3 == 0 { -v } else { v }
        })
        .collect();
    let mut tape = Tape::<S>::new();
    let mut binder = Binder::new();
    let xv = tape.constant(&Tensor::from_f64_slice(vec![batch, d_in], &x)?);
    let w1 = binder.var(&mut tape, p, "w1")?;
    let b1 = binder.var(&mut tape, p, "b1")?;
    let w2 = binder.var(&mut tape, p, "w2")?;
    let b2 = binder.var(&mut tape, p, "b2")?;
    let h = tape.matmul(xv, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, w2)?;
    let o = tape.add(o, b2)?;
    let c = tape.constant(&Tensor::from_f64_slice(vec![batch, d_out], &readout)?);
    let prod = tape.mul(o, c)?;
    let m = tape.mean_all(prod);
    let loss = tape.scale(m, (batch * d_out) as f64); // sum
    let loss_val = tape.value(loss)[0].as_f64();
    let grads = if want {
        let g = tape.backward(loss)?;
        let mut map = std::collections::HashMap::new();
        for (name, var) in binder.entries() {
            map.insert(name.to_string(), g.get(var).unwrap().to_vec());
        }
        Some(map)
    } else {
        None
    };
    Ok(EvalOutput { loss: loss_val, grads })
}

fn mlp_registry<S: Scalar>(seed: u64) -> voplab_core::ParamRegistry<S> {
    use rand::SeedableRng;
    use voplab_core::Tensor;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut reg = voplab_core::ParamRegistry::new();
    reg.register("w1", Tensor::rand_uniform(vec![5, 8], 0.3, &mut rng), true).unwrap();
    reg.register("b1", Tensor::rand_uniform(vec![8], 0.2, &mut rng), true).unwrap();
    reg.register("w2", Tensor::rand_uniform(vec![8, 4], 1.0, &mut rng), true).unwrap();
    reg.register("b2", Tensor::rand_uniform(vec![4], 0.2, &mut rng), true).unwrap();
    reg
}

/// Single-precision gradients of a random 2-layer MLP against central
/// differences at step 1e-4. The difference quotient is evaluated on the
/// f64 twin of the function at the same (exactly representable) f32
/// parameter values, since an f32 loss read-out cannot resolve 1e-4
/// perturbations to the required accuracy.
fn mlp_loss_f64_eval(p: &voplab_core::ParamRegistry<f32>, want: bool) -> Result<EvalOutput<f32>> {
    let loss = mlp_loss::<f64>(&p.cast::<f64>(), false)?.loss;
    let grads = if want { mlp_loss::<f32>(p, true)?.grads } else { None };
    Ok(EvalOutput { loss, grads })
}

#[test]
fn mlp_single_precision_gradients_at_step_1e4() {
    for seed in [1u64, 2, 3, 4, 5] {
        let mut reg = mlp_registry::<f32>(seed);
        let cfg =
            CheckConfig { step: 1e-4, samples: 120, seed, rel_floor: 1e-3, richardson: false };
        let rep = grad_check(&mlp_loss_f64_eval, &mut reg, &cfg).unwrap();
        println!("mlp seed {}: max rel {:.3e}", seed, rep.max_rel_err);
        assert!(rep.ok(1e-3), "seed {}: max rel {:.3e}", seed, rep.max_rel_err);
    }
}


#[test]
fn pipeline_modes_smoke_single_precision() {
    // Small sample count; the acceptance suite runs the full budget.
    for kind in [ProtocolKind::Vop, ProtocolKind::VopC] {
        let cfg = CheckConfig { samples: 25, seed: 11, ..CheckConfig::single(25) };
        let rep = pipeline_check::<f32>(kind, &cfg, 5).unwrap();
        assert!(rep.ok(1e-2), "{}: max rel {:.3e}", kind.name(), rep.max_rel_err);
    }
}
