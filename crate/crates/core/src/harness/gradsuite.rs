//! Finite-difference gradient checks of every block and of the whole
//! (micro-sized) network, in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::hat::{HatConfig, Hab, Ocab, Rhag};
use crate::network::{NetworkConfig, NetworkError, PromptCir};
use crate::nn::{ParamBuilder, ParamStore};
use crate::prompt::{Pim, PromptBank};
use crate::restormer::{Gdfn, Mdta, TransformerBlock, FFN_EXPANSION};
use crate::tensor::gradcheck::{check, GradCheckOptions};
use crate::tensor::{Result, Tensor, TensorError};

pub const MODULES: [&str; 9] = ["mdta", "gdfn", "transformer_block", "hab", "ocab", "rhag", "dpm", "pim", "model"];

/// Relative-error bound for a module.
pub fn tolerance(module: &str) -> f64 {
    if module == "model" {
        1e-3
    } else {
        1e-4
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub module: String,
    pub seed: u64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random-weighted sum, so that errors of opposite sign cannot cancel.
fn probe(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    y.mul(&randn(y.shape(), seed ^ 0x5EED))?.sum()
}

fn hat_config() -> HatConfig {
    HatConfig { window: 4, cab_scale: 0.5, ..HatConfig::new(4, 2) }
}

fn from_network(e: NetworkError) -> TensorError {
    match e {
        NetworkError::Layer(l) => l.source,
        other => TensorError::Argument { op: "network", detail: other.to_string() },
    }
}

/// Builds the module's parameters and inputs and returns the leaves and a
/// loss over them. Leaves are the parameters followed by the inputs.
type Loss = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

fn case(module: &str, seed: u64) -> Result<(Vec<Tensor<f64>>, Loss)> {
    let mut b = ParamBuilder::<f64>::new(seed);
    let x = |shape: &[usize]| randn(shape, seed.wrapping_add(1000));
    let (store, inputs, f): (ParamStore<f64>, Vec<Tensor<f64>>, Box<dyn Fn(&ParamStore<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>>) =
        match module {
            "mdta" => {
                let m = Mdta::new(&mut b, "mdta", 4, 2)?;
                (b.finish(), vec![x(&[1, 4, 5, 6])], Box::new(move |p, i| m.forward(p, &i[0])))
            }
            "gdfn" => {
                let g = Gdfn::new(&mut b, "gdfn", 4, FFN_EXPANSION)?;
                (b.finish(), vec![x(&[1, 4, 5, 5])], Box::new(move |p, i| g.forward(p, &i[0])))
            }
            "transformer_block" => {
                let t = TransformerBlock::new(&mut b, "block", 4, 2, FFN_EXPANSION)?;
                (b.finish(), vec![x(&[1, 4, 5, 6])], Box::new(move |p, i| t.forward(p, &i[0])))
            }
            "hab" => {
                let h = Hab::new(&mut b, "hab", &hat_config(), 2)?;
                (b.finish(), vec![x(&[1, 4, 8, 8])], Box::new(move |p, i| h.forward(p, &i[0])))
            }
            "ocab" => {
                let o = Ocab::new(&mut b, "ocab", &hat_config())?;
                (b.finish(), vec![x(&[1, 4, 8, 8])], Box::new(move |p, i| o.forward(p, &i[0])))
            }
            "rhag" => {
                let r = Rhag::new(&mut b, "rhag", &hat_config(), 2)?;
                (b.finish(), vec![x(&[1, 4, 10, 12])], Box::new(move |p, i| r.forward(p, &i[0])))
            }
            "dpm" => {
                let d = PromptBank::new(&mut b, "dpm", 4, 3, 5)?;
                (b.finish(), vec![x(&[1, 4, 5, 7])], Box::new(move |p, i| d.forward(p, &i[0])))
            }
            "pim" => {
                let m = Pim::new(&mut b, "pim", 4, 4, 2)?;
                let inputs = vec![x(&[1, 4, 5, 5]), randn(&[1, 4, 5, 5], seed.wrapping_add(2000))];
                (b.finish(), inputs, Box::new(move |p, i| m.forward(p, &i[0], &i[1])))
            }
            "model" => {
                let (net, store) = PromptCir::build::<f64>(&NetworkConfig::micro(), seed).map_err(from_network)?;
                let input = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xF00D));
                (store, vec![input], Box::new(move |p, i| net.forward(p, &i[0]).map_err(from_network)))
            }
            other => {
                return Err(TensorError::Argument {
                    op: "gradcheck",
                    detail: format!("unknown module {other:?} (expected one of {MODULES:?})"),
                })
            }
        };
    let n = store.len();
    let leaves: Vec<Tensor<f64>> = store.tensors().iter().cloned().chain(inputs).collect();
    let loss: Loss = Box::new(move |v: &[Tensor<f64>]| {
        let p = store.with_tensors(v[..n].to_vec())?;
        probe(&f(&p, &v[n..])?, seed)
    });
    Ok((leaves, loss))
}

fn options(module: &str, seed: u64) -> GradCheckOptions {
    let base = GradCheckOptions { seed, ..Default::default() };
    if module == "model" {
        // ~170 leaves: a few coordinates each plus directional probes cover
        // every parameter at affordable cost
        GradCheckOptions { coords_per_leaf: 2, directions: 3, ..base }
    } else {
        base
    }
}

pub fn run_case(module: &str, seed: u64) -> Result<CaseResult> {
    let (leaves, loss) = case(module, seed)?;
    let rep = check(&leaves, loss, options(module, seed))?;
    let tol = tolerance(module);
    Ok(CaseResult {
        module: module.to_string(),
        seed,
        rel_err: rep.rel_err(),
        tolerance: tol,
        coords_checked: rep.coords_checked,
        passed: rep.rel_err() < tol,
    })
}

/// Checks `module` under seeds `0..seeds`.
pub fn run_module(module: &str, seeds: u64) -> Result<Vec<CaseResult>> {
    (0..seeds).map(|s| run_case(module, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_rejected() {
        assert!(run_case("nope", 0).is_err());
    }

    #[test]
    fn every_block_passes_one_seed() {
        for m in MODULES.iter().filter(|&&m| m != "model") {
            let r = run_case(m, 3).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
