//! Reverse-mode gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmpib_tensor::{Dense, Lstm, ParamStore, Tape, Tensor, Var};

const H: f64 = 1e-4;

/// |a − n| relative to the larger magnitude, floored so that gradients that
/// are both ~0 compare on absolute error.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Central differences of `f` over every entry of every input.
fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            g.push((f(&plus) - f(&minus)) / (2.0 * H));
        }
        out.push(g);
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMulW(usize),
    Bias(usize),
    Scale(usize, f64),
    Shift(usize, f64),
    Exp(usize),
    LogPos(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Clamp(usize),
    SwapHalves(usize),
}

struct Graph {
    steps: Vec<Step>,
    rows: usize,
    cols: usize,
}

impl Graph {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let rows = rng.gen_range(1..4);
        let cols = rng.gen_range(2..5);
        let n_steps = rng.gen_range(4..10);
        let mut steps = Vec::new();
        let mut avail = 2; // X and Y are r×c
        for _ in 0..n_steps {
            let a = rng.gen_range(0..avail);
            let b = rng.gen_range(0..avail);
            let s = match rng.gen_range(0..14) {
                0 => Step::Add(a, b),
                1 => Step::Sub(a, b),
                2 => Step::Mul(a, b),
                3 => Step::MatMulW(a),
                4 => Step::Bias(a),
                5 => Step::Scale(a, rng.gen_range(-2.0..2.0)),
                6 => Step::Shift(a, rng.gen_range(-1.0..1.0)),
                7 => Step::Exp(a),
                8 => Step::LogPos(a),
                9 => Step::Tanh(a),
                10 => Step::Sigmoid(a),
                11 => Step::Relu(a),
                12 => Step::Clamp(a),
                _ => Step::SwapHalves(a),
            };
            steps.push(s);
            avail += 1;
        }
        Self { steps, rows, cols }
    }

    fn input_shapes(&self) -> [(usize, usize); 4] {
        [
            (self.rows, self.cols),
            (self.rows, self.cols),
            (self.cols, self.cols),
            (1, self.cols),
        ]
    }

    /// Builds the graph; returns the loss and the values feeding kinked ops.
    fn run(&self, tape: &mut Tape, inputs: &[Tensor]) -> (Var, Vec<Var>, Vec<Var>) {
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let (w, b) = (leaves[2], leaves[3]);
        let mut vals = vec![leaves[0], leaves[1]];
        let mut kinks = Vec::new();
        for s in &self.steps {
            let v = match *s {
                Step::Add(a, c) => tape.add(vals[a], vals[c]).unwrap(),
                Step::Sub(a, c) => tape.sub(vals[a], vals[c]).unwrap(),
                Step::Mul(a, c) => tape.mul(vals[a], vals[c]).unwrap(),
                Step::MatMulW(a) => tape.matmul(vals[a], w).unwrap(),
                Step::Bias(a) => tape.add_bias(vals[a], b).unwrap(),
                Step::Scale(a, k) => tape.scale(vals[a], k),
                Step::Shift(a, k) => tape.add_scalar(vals[a], k),
                Step::Exp(a) => {
                    let t = tape.tanh(vals[a]);
                    tape.exp(t)
                }
                Step::LogPos(a) => {
                    let s = tape.sigmoid(vals[a]);
                    let p = tape.add_scalar(s, 0.1);
                    tape.log(p).unwrap()
                }
                Step::Tanh(a) => tape.tanh(vals[a]),
                Step::Sigmoid(a) => tape.sigmoid(vals[a]),
                Step::Relu(a) => {
                    kinks.push(vals[a]);
                    tape.relu(vals[a])
                }
                Step::Clamp(a) => {
                    kinks.push(vals[a]);
                    tape.clamp(vals[a], -0.5, 0.5)
                }
                Step::SwapHalves(a) => {
                    let half = self.cols / 2;
                    let l = tape.slice_cols(vals[a], 0, half).unwrap();
                    let r = tape.slice_cols(vals[a], half, self.cols).unwrap();
                    tape.concat_cols(&[r, l]).unwrap()
                }
            };
            vals.push(v);
        }
        let last = *vals.last().unwrap();
        let prev = vals[vals.len() - 2];
        let sq = tape.mul(last, prev).unwrap();
        let m = tape.mean(sq).unwrap();
        let s = tape.sum(last);
        let loss = tape.add(m, s).unwrap();
        (loss, leaves, kinks)
    }
}

fn kink_distance(tape: &Tape, kinks: &[Var]) -> f64 {
    let mut d = f64::INFINITY;
    for &k in kinks {
        for &x in tape.value(k).data() {
            d = d.min(x.abs()).min((x - 0.5).abs()).min((x + 0.5).abs());
        }
    }
    d
}

#[test]
fn random_graphs_match_finite_differences() {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 100 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = Graph::random(&mut rng);
        let inputs: Vec<Tensor> = graph
            .input_shapes()
            .iter()
            .map(|&(r, c)| random_tensor(&mut rng, r, c))
            .collect();

        let mut tape = Tape::new();
        let (loss, leaves, kinks) = graph.run(&mut tape, &inputs);
        // finite differences across a ReLU/clamp kink are meaningless
        if kink_distance(&tape, &kinks) < 1e-2 {
            continue;
        }
        let grads = tape.gradients(loss).unwrap();
        let f = |xs: &[Tensor]| {
            let mut t = Tape::new();
            let (l, _, _) = graph.run(&mut t, xs);
            t.value(l).data()[0]
        };
        let numeric = numeric_grads(&inputs, &f);
        for (leaf, num) in leaves.iter().zip(&numeric) {
            let analytic = grads
                .get(*leaf)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; num.len()]);
            for (a, n) in analytic.iter().zip(num) {
                assert!(a.is_finite());
                worst = worst.max(rel_err(*a, *n));
            }
        }
        checked += 1;
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let l1 = Dense::new(&mut store, "l1", 3, 5, &mut rng).unwrap();
    let l2 = Dense::new(&mut store, "l2", 5, 2, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let x = random_tensor(&mut rng, 4, 3);

    let loss_of = |store: &ParamStore, tape: &mut Tape| -> Var {
        let xv = tape.constant(x.clone());
        let h = l1.forward(tape, store, xv).unwrap();
        let h = tape.tanh(h);
        let y = l2.forward(tape, store, h).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.sum(sq)
    };

    let mut tape = Tape::new();
    let loss = loss_of(&store, &mut tape);
    let mut grad_store = store.clone();
    tape.backward(loss, &mut grad_store).unwrap();
    assert!(tape.is_empty(), "tape cleared after backward");

    for id in store.ids() {
        let analytic = grad_store.grad(id).unwrap().data().to_vec();
        for (i, a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[i] += delta;
                let mut t = Tape::new();
                let l = loss_of(&s, &mut t);
                t.value(l).data()[0]
            };
            let n = (eval(H) - eval(-H)) / (2.0 * H);
            assert!(
                rel_err(*a, n) < 1e-4,
                "{} [{i}]: {a} vs {n}",
                store.name(id)
            );
        }
    }
}

#[test]
fn lstm_five_step_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let cell = Lstm::new(&mut store, "cell", 3, 4, &mut rng).unwrap();
    let xs: Vec<Tensor> = (0..5).map(|_| random_tensor(&mut rng, 2, 3)).collect();
    let h0 = random_tensor(&mut rng, 2, 4);
    let c0 = random_tensor(&mut rng, 2, 4);
    let readout = random_tensor(&mut rng, 2, 4);

    let run = |store: &ParamStore, inputs: &[Tensor], tape: &mut Tape| -> (Var, Vec<Var>) {
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let (mut h, mut c) = (leaves[5], leaves[6]);
        for &x in &leaves[..5] {
            (h, c) = cell.step(tape, store, x, h, c).unwrap();
        }
        let r = tape.constant(readout.clone());
        let hr = tape.mul(h, r).unwrap();
        let a = tape.sum(hr);
        let b = tape.sum(c);
        (tape.add(a, b).unwrap(), leaves)
    };

    let mut inputs = xs.clone();
    inputs.push(h0);
    inputs.push(c0);

    let mut tape = Tape::new();
    let (loss, leaves) = run(&store, &inputs, &mut tape);
    let grads = tape.gradients(loss).unwrap();
    let numeric = numeric_grads(&inputs, &|xs: &[Tensor]| {
        let mut t = Tape::new();
        let (l, _) = run(&store, xs, &mut t);
        t.value(l).data()[0]
    });
    for (leaf, num) in leaves.iter().zip(&numeric) {
        for (a, n) in grads.get(*leaf).unwrap().data().iter().zip(num) {
            assert!(rel_err(*a, *n) < 1e-4, "input grad {a} vs {n}");
        }
    }

    let mut grad_store = store.clone();
    tape.backward(loss, &mut grad_store).unwrap();
    for id in store.ids() {
        for (i, a) in grad_store.grad(id).unwrap().data().iter().enumerate() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[i] += delta;
                let mut t = Tape::new();
                let (l, _) = run(&s, &inputs, &mut t);
                t.value(l).data()[0]
            };
            let n = (eval(H) - eval(-H)) / (2.0 * H);
            assert!(rel_err(*a, n) < 1e-4, "{}[{i}] {a} vs {n}", store.name(id));
        }
    }
}

#[test]
fn lstm_zero_params_give_zero_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cell = Lstm::new(&mut store, "cell", 2, 3, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let z = Tensor::zeros(store.value(id).shape());
        *store.value_mut(id) = z;
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    let h = tape.constant(Tensor::zeros(&[1, 3]));
    let c = tape.constant(Tensor::zeros(&[1, 3]));
    let (h1, c1) = cell.step(&mut tape, &store, x, h, c).unwrap();
    assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(c1).data().iter().all(|&v| v == 0.0));
}

#[test]
fn saturated_forget_gate_keeps_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cell = Lstm::new(&mut store, "cell", 2, 3, &mut rng).unwrap();
    *store.value_mut(cell.weight) = Tensor::zeros(&[5, 12]);
    let mut bias = vec![0.0; 12];
    bias[3..6].fill(10.0);
    *store.value_mut(cell.bias) = Tensor::new(vec![12], bias).unwrap();

    let prev = vec![0.7, -1.3, 2.0];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(vec![0.4, -0.2]));
    let h = tape.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
    let c = tape.constant(Tensor::row(prev.clone()));
    let (_, c1) = cell.step(&mut tape, &store, x, h, c).unwrap();
    for (got, want) in tape.value(c1).data().iter().zip(&prev) {
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }
}

#[test]
fn lstm_rejects_wrong_input_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cell = Lstm::new(&mut store, "cell", 2, 3, &mut rng).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 5]));
    let h = tape.constant(Tensor::zeros(&[1, 3]));
    let c = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(cell.step(&mut tape, &store, x, h, c).is_err());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = 2.75;
    let x = random_tensor(&mut rng, 3, 3);
    let y = random_tensor(&mut rng, 3, 3);

    let grad_of = |combine: &dyn Fn(&mut Tape, Var, Var) -> Var| {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let yv = tape.input(y.clone());
        let l = combine(&mut tape, xv, yv);
        let g = tape.gradients(l).unwrap();
        (g.get(xv).unwrap().clone(), g.get(yv).unwrap().clone())
    };
    let l1 = |t: &mut Tape, x: Var, y: Var| {
        let p = t.matmul(x, y).unwrap();
        let p = t.tanh(p);
        t.sum(p)
    };
    let l2 = |t: &mut Tape, x: Var, y: Var| {
        let e = t.sigmoid(x);
        let p = t.mul(e, y).unwrap();
        t.mean(p).unwrap()
    };
    let (g1x, g1y) = grad_of(&l1);
    let (g2x, g2y) = grad_of(&l2);
    let (gx, gy) = grad_of(&|t, x, y| {
        let a1 = l1(t, x, y);
        let s = t.scale(a1, a);
        let b = l2(t, x, y);
        t.add(s, b).unwrap()
    });
    for ((g, g1), g2) in gx.data().iter().zip(g1x.data()).zip(g2x.data()) {
        assert!((g - (a * g1 + g2)).abs() < 1e-10);
    }
    for ((g, g1), g2) in gy.data().iter().zip(g1y.data()).zip(g2y.data()) {
        assert!((g - (a * g1 + g2)).abs() < 1e-10);
    }
}

#[test]
fn adam_runs_are_bit_identical() {
    let train = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let layer = Dense::new(&mut store, "l", 3, 2, &mut rng).unwrap();
        let x = random_tensor(&mut rng, 5, 3);
        for _ in 0..25 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = layer.forward(&mut tape, &store, xv).unwrap();
            let y = tape.tanh(y);
            let sq = tape.mul(y, y).unwrap();
            let l = tape.sum(sq);
            tape.backward(l, &mut store).unwrap();
            store.adam_step(&Default::default()).unwrap();
        }
        store.snapshot()
    };
    assert_eq!(train(), train());
}
