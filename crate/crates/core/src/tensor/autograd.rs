use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with op recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

/// The recorded ops reachable from a scalar loss, in execution order.
///
/// Tensor ids are assigned monotonically at creation, so sorting the reachable
/// set by id reproduces the order in which the forward pass ran.
pub struct Tape<T: Scalar> {
    loss: Tensor<T>,
    entries: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn from_loss(loss: &Tensor<T>) -> Result<Self> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let mut seen = HashSet::new();
        let mut stack = vec![loss.clone()];
        let mut entries = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = t.node() {
                stack.extend(node.inputs.iter().cloned());
            }
            entries.push(t);
        }
        entries.sort_by_key(|t| t.id());
        Ok(Tape { loss: loss.clone(), entries })
    }

    /// Op names in execution order; leaves are omitted.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.entries.iter().filter_map(|t| t.op_name()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replays the tape in reverse, accumulating into every reachable leaf's
    /// gradient once. Returns the op names in the order they were visited.
    pub fn backward(&self) -> Vec<&'static str> {
        let mut visited = Vec::new();
        if !self.loss.requires_grad() {
            return visited;
        }
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.loss.id(), vec![T::one()]);
        for t in self.entries.iter().rev() {
            let Some(grad) = pending.remove(&t.id()) else {
                continue;
            };
            match t.node() {
                None => t.accumulate_grad(&grad),
                Some(node) => {
                    visited.push(node.op);
                    let grads = (node.backward)(&super::BackwardArgs {
                        grad: &grad,
                        out: t.data(),
                        inputs: &node.inputs,
                    });
                    debug_assert_eq!(grads.len(), node.inputs.len(), "{}", node.op);
                    for (input, g) in node.inputs.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "{} grad size", node.op);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(input.id(), g);
                            }
                        }
                    }
                }
            }
        }
        visited
    }
}

impl<T: Scalar> Tensor<T> {
    /// Back-propagates from this scalar into every reachable leaf that requires
    /// a gradient. Repeated calls accumulate; use [`Tensor::zero_grad`] on the
    /// leaves to reset.
    pub fn backward(&self) -> Result<()> {
        Tape::from_loss(self)?.backward();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_grad_and_accumulation() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn replay_is_reverse_execution_order() {
        let x = Tensor::<f64>::param(&[2], vec![0.5, -1.0]).unwrap();
        let a = x.gelu().unwrap();
        let b = a.scale(3.0).unwrap();
        let c = b.mul(&x).unwrap();
        let loss = c.sum().unwrap();
        let tape = Tape::from_loss(&loss).unwrap();
        let forward = tape.op_names();
        assert_eq!(forward, vec!["gelu", "scale", "mul", "sum"]);
        let mut visited = tape.backward();
        visited.reverse();
        assert_eq!(visited, forward);
    }

    #[test]
    fn shared_leaf_written_once() {
        // x feeds two branches; the leaf must receive the summed gradient in a
        // single accumulation.
        let x = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        let y = x.scale(2.0).unwrap().add(&x.mul(&x).unwrap()).unwrap();
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0 + 6.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(2.0).unwrap());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }
}
