use super::tensor::{Graph, NodeId, Op, Tensor};
use super::{EngineError, Result};

/// Gradient of the scalar `output` with respect to each tensor in `wrt`.
///
/// Tensors that `output` does not depend on (including constants and tensors
/// from other graphs) get an exact zero gradient of matching shape. With
/// `create_graph` set, the returned gradients are recorded in the same graph
/// as `output` and can be fed into further differentiable computation.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(EngineError::Contract(format!(
            "grad needs a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    let mut result: Vec<Tensor> = wrt.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let Some((graph, out_id)) = output.node.as_ref().map(|(g, id)| (g.clone(), *id)) else {
        return Ok(result);
    };
    let targets: Vec<Option<NodeId>> = wrt
        .iter()
        .map(|t| match &t.node {
            Some((g, id)) if g.same(&graph) && *id <= out_id => Some(*id),
            _ => None,
        })
        .collect();
    let Some(lowest) = targets.iter().flatten().copied().min() else {
        return Ok(result);
    };

    // nodes on some path from a target up to the output
    let n = out_id + 1;
    let mut needs = vec![false; n];
    for id in targets.iter().flatten() {
        needs[*id] = true;
    }
    for id in lowest..n {
        if !needs[id] && graph.inputs_of(id).iter().any(|&i| needs[i]) {
            needs[id] = true;
        }
    }
    if !needs[out_id] {
        return Ok(result);
    }

    let mut is_target = vec![false; n];
    for id in targets.iter().flatten() {
        is_target[*id] = true;
    }
    let mut found: Vec<Option<Tensor>> = vec![None; n];
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[out_id] = Some(Tensor::ones(output.shape()));

    for id in (lowest..n).rev() {
        let Some(g) = grads[id].take() else { continue };
        if is_target[id] {
            found[id] = Some(g.clone());
        }
        let (op, inputs) = graph.with_node(id, |node| (node.op.clone(), node.inputs.clone()));
        if inputs.is_empty() {
            continue;
        }
        let wanted: Vec<bool> = inputs.iter().map(|&i| needs[i]).collect();
        if !wanted.iter().any(|&w| w) {
            continue;
        }
        let input_grads = vjp(&graph, &op, id, &inputs, &wanted, &g, create_graph)?;
        for (&input, ig) in inputs.iter().zip(input_grads) {
            if let Some(ig) = ig {
                grads[input] = Some(match grads[input].take() {
                    Some(acc) => acc.add(&ig)?,
                    None => ig,
                });
            }
        }
    }

    for (slot, target) in result.iter_mut().zip(&targets) {
        if let Some(g) = target.and_then(|id| found[id].clone()) {
            *slot = g;
        }
    }
    Ok(result)
}

/// Vector-Jacobian products of one node. Built from ordinary tensor ops on
/// handles that stay attached when `create_graph` is set.
fn vjp(
    graph: &Graph,
    op: &Op,
    id: NodeId,
    inputs: &[NodeId],
    wanted: &[bool],
    g: &Tensor,
    create_graph: bool,
) -> Result<Vec<Option<Tensor>>> {
    let h = |i: NodeId| graph.handle(i, create_graph);
    let a = h(inputs[0]);
    let want = |k: usize| wanted[k];
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };

    match op {
        Op::Leaf | Op::Constant => Ok(vec![]),
        Op::Add => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())]),
        Op::Sub => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.neg()).transpose()?]),
        Op::Mul => {
            let b = h(inputs[1]);
            Ok(vec![
                want(0).then(|| g.mul(&b)).transpose()?,
                want(1).then(|| g.mul(&a)).transpose()?,
            ])
        }
        Op::Div => {
            let b = h(inputs[1]);
            let ga = want(0).then(|| g.div(&b)).transpose()?;
            let gb = if want(1) {
                let out = h(id);
                Some(g.mul(&out)?.div(&b)?.neg()?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Op::Scale(s) => one(g.scale(*s)),
        Op::MatMul => {
            let b = h(inputs[1]);
            let ga = want(0).then(|| g.matmul(&b.transpose()?)).transpose()?;
            let gb = want(1).then(|| a.transpose()?.matmul(g)).transpose()?;
            Ok(vec![ga, gb])
        }
        Op::Transpose => one(g.transpose()),
        Op::Relu => {
            let mask: Vec<f64> = a.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            one(g.mul(&Tensor::raw(a.shape().to_vec(), mask)))
        }
        Op::Exp => one(g.mul(&h(id))),
        Op::Log => one(g.div(&a)),
        Op::Norm => {
            let out = h(id);
            if out.item() == 0.0 {
                // subgradient at the origin
                one(Ok(Tensor::zeros(a.shape())))
            } else {
                one(a.mul(&g.div(&out)?))
            }
        }
        Op::SumTo => one(g.broadcast_to(a.shape())),
        Op::BroadcastTo => one(g.sum_to(a.shape())),
        Op::Reshape => one(g.reshape(a.shape())),
        Op::SelectRows(indices) => one(g.scatter_rows(indices, a.rows())),
        Op::ScatterRows(indices) => one(g.select_rows(indices)),
        Op::ConcatRows => {
            let mut start = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for (k, &input) in inputs.iter().enumerate() {
                let part = h(input);
                let rows = part.rows();
                if want(k) {
                    let idx: Vec<usize> = (start..start + rows).collect();
                    out.push(Some(g.select_rows(&idx)?.reshape(part.shape())?));
                } else {
                    out.push(None);
                }
                start += rows;
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_first_derivative() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        assert_eq!(grad(&y, &[&x], false).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn cube_second_derivative() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::scalar(2.0));
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let dy = grad(&y, &[&x], true).unwrap().remove(0);
        assert_eq!(dy.item(), 12.0);
        assert!(dy.is_tracked());
        let d2y = grad(&dy, &[&x], false).unwrap().remove(0);
        assert_eq!(d2y.item(), 12.0);
    }

    #[test]
    fn one_step_sgd_on_quadratic() {
        // L = |t'|^2 / 2 with t' = t - a * 2t, so dL/dt = (1 - 2a)^2 t
        let alpha = 0.1;
        let g = Graph::new();
        let theta = g.leaf(&Tensor::vector(vec![1.0]).unwrap());
        let inner_loss = theta.squared_l2_norm().unwrap();
        let gi = grad(&inner_loss, &[&theta], true).unwrap().remove(0);
        let theta_prime = theta.sub(&gi.scale(alpha).unwrap()).unwrap();
        let outer = theta_prime.squared_l2_norm().unwrap().scale(0.5).unwrap();
        let d = grad(&outer, &[&theta], false).unwrap().remove(0);
        assert!((d.item() - 0.64).abs() < 1e-15);
    }

    #[test]
    fn unreachable_and_constant_gradients_are_zero() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let z = g.leaf(&Tensor::vector(vec![5.0, 6.0, 7.0]).unwrap());
        let c = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let other = Graph::new().leaf(&Tensor::scalar(1.0));
        let y = x.mul(&c).unwrap().sum().unwrap();
        let gs = grad(&y, &[&z, &c, &other, &x], false).unwrap();
        assert_eq!(gs[0].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(gs[1].data(), &[0.0, 0.0]);
        assert_eq!(gs[2].data(), &[0.0]);
        assert_eq!(gs[3].data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(grad(&x, &[&x], false), Err(EngineError::Contract(_))));
    }

    #[test]
    fn repeated_use_accumulates() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::scalar(1.5));
        let y = x.add(&x).unwrap().add(&x.scale(4.0).unwrap()).unwrap();
        assert_eq!(grad(&y, &[&x], false).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn norm_at_origin_has_zero_gradient() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = x.norm().unwrap();
        let d = grad(&y, &[&x], false).unwrap().remove(0);
        assert_eq!(d.data(), &[0.0, 0.0]);
    }

    #[test]
    fn first_order_grads_are_detached() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::scalar(2.0));
        let y = x.exp().unwrap();
        let before = g.len();
        let d = grad(&y, &[&x], false).unwrap().remove(0);
        assert!(!d.is_tracked());
        assert_eq!(g.len(), before);
    }
}
