mod common;

use std::collections::HashMap;

use common::*;
use conegraph::graph::{EvalOptions, Graph, GraphBuilder, NodeId};
use proptest::prelude::*;

/// One body step `x ← relu(a·x + c)`, `k ← k + 1` as its own graph.
fn body_step(b: &mut GraphBuilder, x: NodeId, k: NodeId, a: f64, c: &[f64]) -> Vec<NodeId> {
    let ax = b.scale(a, x).unwrap();
    let cn = b.constant(c.to_vec());
    let s = b.add(ax, cn).unwrap();
    let x = b.relu(s).unwrap();
    let one = b.scalar(1.0);
    let k = b.add(k, one).unwrap();
    vec![x, k]
}

fn loop_graph(x0: &[f64], a: f64, c: &[f64], stop: f64) -> Graph {
    let mut b = GraphBuilder::new();
    let x = b.constant(x0.to_vec());
    let k = b.scalar(0.0);
    let out = b
        .while_loop(
            &[x, k],
            &[],
            1000,
            |b, v, _| {
                let limit = b.scalar(stop);
                b.greater(limit, v[1])
            },
            |b, v, _| Ok(body_step(b, v[0], v[1], a, c)),
        )
        .unwrap();
    b.finish(&out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn loop_equals_manual_iteration(
        seed in any::<u64>(),
        d in 1usize..6,
        a in -1.5f64..1.5,
        iters in 0usize..=100,
    ) {
        let mut r = rng(seed);
        let x0 = randn(&mut r, d);
        let c = randn(&mut r, d);
        let looped = loop_graph(&x0, a, &c, iters as f64).evaluate(&HashMap::new()).unwrap();

        let mut b = GraphBuilder::new();
        let x = b.input(d);
        let k = b.input(1);
        let out = body_step(&mut b, x, k, a, &c);
        let step = b.finish(&out).unwrap();
        let (mut xv, mut kv) = (x0.clone(), vec![0.0]);
        while kv[0] < iters as f64 {
            let res = step.evaluate_positional(&[&xv, &kv], &EvalOptions::default()).unwrap();
            let outs = res.outputs();
            xv = outs[0].to_vec();
            kv = outs[1].to_vec();
        }
        let outs = looped.outputs();
        prop_assert_eq!(outs[0], &xv[..]);
        prop_assert_eq!(outs[1][0], iters as f64);
        prop_assert_eq!(looped.loops[0].iterations, iters);
    }

    #[test]
    fn evaluation_is_deterministic(seed in any::<u64>(), d in 1usize..6) {
        let mut r = rng(seed);
        let g = loop_graph(&randn(&mut r, d), 0.7, &randn(&mut r, d), 17.0);
        let first = g.evaluate(&HashMap::new()).unwrap();
        let second = g.evaluate(&HashMap::new()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        for (a, b) in first.outputs().iter().zip(second.outputs()) {
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn random_dags_are_acyclic_and_memoized(seed in any::<u64>(), size in 1usize..40) {
        use rand::Rng;
        let mut r = rng(seed);
        let mut b = GraphBuilder::new();
        let x = b.input(3);
        let mut nodes = vec![x];
        for _ in 0..size {
            let i = nodes[r.random_range(0..nodes.len())];
            let j = nodes[r.random_range(0..nodes.len())];
            let n = match r.random_range(0..3) {
                0 => b.add(i, j).unwrap(),
                1 => b.mul(i, j).unwrap(),
                _ => b.scale(0.5, i).unwrap(),
            };
            nodes.push(n);
        }
        let last = *nodes.last().unwrap();
        let g = b.finish(&[last]).unwrap();

        let order = g.topological_order();
        prop_assert_eq!(order.len(), g.len());
        let mut position = vec![0; g.len()];
        for (p, id) in order.iter().enumerate() {
            position[id.index()] = p;
        }
        for node in g.nodes() {
            for inp in node.inputs() {
                prop_assert!(inp.index() < node.id().index());
                prop_assert!(position[inp.index()] < position[node.id().index()]);
            }
        }

        let input = vec![0.3, -1.2, 2.0];
        let res = g.evaluate(&HashMap::from([(x, input.clone())])).unwrap();
        // each reachable node is evaluated once however many consumers it has
        let mut reachable = vec![false; g.len()];
        reachable[last.index()] = true;
        reachable[x.index()] = true;
        for node in g.nodes().iter().rev() {
            if reachable[node.id().index()] {
                for inp in node.inputs() {
                    reachable[inp.index()] = true;
                }
            }
        }
        prop_assert_eq!(res.nodes_evaluated, reachable.iter().filter(|r| **r).count());

        // naive recursive evaluation agrees
        fn naive(g: &Graph, id: NodeId, x: &[f64]) -> Vec<f64> {
            let node = g.node(id).unwrap();
            let ins: Vec<Vec<f64>> = node.inputs().iter().map(|i| naive(g, *i, x)).collect();
            match node.op().name() {
                "input" => x.to_vec(),
                "add" => ins[0].iter().zip(&ins[1]).map(|(a, b)| a + b).collect(),
                "elementwise-multiply" => ins[0].iter().zip(&ins[1]).map(|(a, b)| a * b).collect(),
                "scalar-multiply" => ins[1].iter().map(|v| v * ins[0][0]).collect(),
                "constant" => match node.op() {
                    conegraph::graph::Op::Constant(c) => c.to_vec(),
                    _ => unreachable!(),
                },
                other => panic!("unexpected op {other}"),
            }
        }
        if size <= 12 {
            prop_assert_eq!(res.outputs()[0], &naive(&g, last, &input)[..]);
        }
    }
}
