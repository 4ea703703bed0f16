use std::collections::{HashMap, HashSet};

use super::{Op, Real, Tensor};

/// Gradients of `output` (summed if not scalar) with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves tracked and can
/// be differentiated again. Entries are `None` when `output` does not depend
/// on the corresponding tensor.
pub fn grad<T: Real>(output: &Tensor<T>, wrt: &[&Tensor<T>], create_graph: bool) -> Vec<Option<Tensor<T>>> {
    let targets: HashMap<usize, usize> = wrt.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
    let order = topo_order(output);

    // A node is relevant when some gradient target is reachable from it.
    let mut relevant: HashSet<usize> = HashSet::new();
    for node in &order {
        let hit = targets.contains_key(&node.id())
            || node.0.grad_fn.as_ref().is_some_and(|gf| gf.inputs.iter().any(|i| relevant.contains(&i.id())));
        if hit {
            relevant.insert(node.id());
        }
    }

    let mut result: Vec<Option<Tensor<T>>> = vec![None; wrt.len()];
    if !relevant.contains(&output.id()) {
        return result;
    }

    let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
    grads.insert(output.id(), Tensor::full(T::one(), output.shape()));

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if let Some(&slot) = targets.get(&node.id()) {
            result[slot] = Some(if create_graph { g.clone() } else { g.detach() });
        }
        let Some(gf) = node.0.grad_fn.as_ref() else { continue };
        let need: Vec<bool> = gf.inputs.iter().map(|i| relevant.contains(&i.id())).collect();
        if !need.iter().any(|&b| b) {
            continue;
        }
        let inputs: Vec<Tensor<T>> =
            if create_graph { gf.inputs.clone() } else { gf.inputs.iter().map(Tensor::detach).collect() };
        let g = if create_graph { g } else { g.detach() };
        let input_grads = backward(&gf.op, &inputs, &g, &need);
        for ((inp, ig), &n) in gf.inputs.iter().zip(input_grads).zip(&need) {
            if !n {
                continue;
            }
            let Some(ig) = ig else { continue };
            debug_assert_eq!(ig.numel(), inp.numel());
            let ig = if ig.shape() == inp.shape() { ig } else { ig.reshape(inp.shape()) };
            let ig = if create_graph { ig } else { ig.detach() };
            match grads.remove(&inp.id()) {
                Some(acc) => {
                    grads.insert(inp.id(), acc.add(&ig));
                }
                None => {
                    grads.insert(inp.id(), ig);
                }
            }
        }
    }
    result
}

/// Post-order (inputs before consumers) over tracked nodes.
fn topo_order<T: Real>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(gf) = t.0.grad_fn.as_ref() {
            for i in &gf.inputs {
                if i.requires_grad() && !seen.contains(&i.id()) {
                    stack.push((i.clone(), false));
                }
            }
        }
    }
    order
}

fn backward<T: Real>(op: &Op<T>, x: &[Tensor<T>], g: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
    let one = T::one();
    match op {
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), need[1].then(|| g.neg())],
        Op::Mul => vec![need[0].then(|| g.mul(&x[1])), need[1].then(|| g.mul(&x[0]))],
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::MulConst(m) => vec![Some(g.mul_const(m.clone()))],
        Op::Pow(p) => vec![Some(g.mul(&x[0].pow(*p - one)).scale(*p))],
        Op::Tanh => {
            let t = x[0].tanh();
            vec![Some(g.mul(&t.square().neg().add_scalar(one)))]
        }
        Op::Sigmoid => {
            let s = x[0].sigmoid();
            vec![Some(g.mul(&s.mul(&s.neg().add_scalar(one))))]
        }
        Op::Softplus => vec![Some(g.mul(&x[0].sigmoid()))],
        Op::MatMul { ta, tb } => {
            let (a, b) = (&x[0], &x[1]);
            let da = need[0].then(|| if *ta { b.matmul_t(g, *tb, true) } else { g.matmul_t(b, false, !*tb) });
            let db = need[1].then(|| if *tb { g.matmul_t(a, true, *ta) } else { a.matmul_t(g, !*ta, false) });
            vec![da, db]
        }
        Op::Sparse { map, transpose } => vec![Some(g.sparse(map, !*transpose))],
        Op::Reduce { rows, cols, axis } => vec![Some(g.expand(*rows, *cols, *axis))],
        Op::Expand { rows, cols, axis } => vec![Some(g.reduce(*rows, *cols, *axis))],
        Op::Reshape => vec![Some(g.reshape(x[0].shape()))],
    }
}
