use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::ops::vjp;
use super::params::Params;
use super::tensor::Tensor;

/// Gradients keyed by parameter name, shaped like the parameters.
pub type GradientMap = Params;

/// Reverse topological order (output first) of every node that needs a gradient.
fn reverse_topo(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.requires_grad() || !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for input in node.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order.reverse();
    order
}

/// d`loss`/d`wrt[i]` for each requested tensor.
///
/// A tensor that the loss does not depend on gets a zero gradient rather than
/// an error. With `create_graph` the returned gradients carry their own graph
/// and can be differentiated again; otherwise they are constants.
pub fn grad(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.item()?.is_finite() {
        return Err(Error::NonFinite { op: "backward" });
    }
    let targets: HashSet<u64> = wrt.iter().map(Tensor::id).collect();
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(loss.id(), Tensor::ones(loss.shape()));

    for t in reverse_topo(loss) {
        let Some(node) = t.node() else { continue };
        let g = if targets.contains(&t.id()) {
            grads.get(&t.id()).cloned()
        } else {
            grads.remove(&t.id())
        };
        let Some(g) = g else { continue };
        let needs: Vec<bool> = node.inputs.iter().map(Tensor::requires_grad).collect();
        let contributions = if create_graph {
            vjp(&node.op, &node.inputs, &needs, &g)?
        } else {
            let detached: Vec<Tensor> = node.inputs.iter().map(Tensor::detach).collect();
            vjp(&node.op, &detached, &needs, &g.detach())?
        };
        for (input, contrib) in node.inputs.iter().zip(contributions) {
            let Some(contrib) = contrib else { continue };
            if !input.requires_grad() {
                continue;
            }
            let acc = match grads.remove(&input.id()) {
                Some(prev) => {
                    let sum = prev.add(&contrib)?;
                    if create_graph {
                        sum
                    } else {
                        sum.detach()
                    }
                }
                None => contrib,
            };
            grads.insert(input.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(w.shape()))
        })
        .collect())
}

/// Named gradients of `loss` for every entry of `params`.
pub fn backward(loss: &Tensor, params: &Params, create_graph: bool) -> Result<GradientMap> {
    let tensors: Vec<Tensor> = params.tensors().cloned().collect();
    let grads = grad(loss, &tensors, create_graph)?;
    Ok(Params::from_entries(
        params.names().map(str::to_owned).zip(grads),
    ))
}
