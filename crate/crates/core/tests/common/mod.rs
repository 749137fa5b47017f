#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semst::diffcore::{DiffError, Graph, NodeId, Tensor};
use semst::embeddings::{EmbeddingTable, Vocab};
use semst::model::{Example, Model, ModelConfig, Objective};

pub type Build = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId, DiffError>>;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces a node to a scalar through a fixed random weighting so no
/// adjoint cancels by symmetry.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId, DiffError> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// One scalarized case per differentiable primitive: (name, input shape, builder).
pub fn primitive_cases() -> Vec<(&'static str, Vec<usize>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let c34 = rand_tensor(&mut rng, &[3, 4], 1.0);
    let c23 = rand_tensor(&mut rng, &[2, 3], 1.0);
    let row3 = rand_tensor(&mut rng, &[1, 3], 1.0);
    let keys = rand_tensor(&mut rng, &[4, 2, 3], 1.0);
    let vals = rand_tensor(&mut rng, &[3, 2, 5], 1.0);
    let other = rand_tensor(&mut rng, &[2, 3], 1.0);
    let cell = rand_tensor(&mut rng, &[2, 3], 1.0);
    let mut cases: Vec<(&'static str, Vec<usize>, Build)> = Vec::new();
    macro_rules! case {
        ($name:expr, $shape:expr, $f:expr) => {
            cases.push(($name, $shape, Box::new($f)))
        };
    }
    {
        let c = c34.clone();
        case!("matmul", vec![2, 3], move |g: &mut Graph, x| {
            let w = g.constant(c.clone());
            let y = g.matmul(x, w)?;
            weighted_sum(g, y, 1)
        });
    }
    {
        let c = c34.clone();
        case!("matmul_rhs", vec![3, 4], move |g: &mut Graph, x| {
            let _ = &c;
            let a = g.constant(Tensor::from_rows(&[[0.3, -0.2, 0.5], [0.1, 0.9, -0.4]]));
            let y = g.matmul(a, x)?;
            weighted_sum(g, y, 2)
        });
    }
    {
        let c = c34.clone();
        case!("matmul_t", vec![2, 4], move |g: &mut Graph, x| {
            let w = g.constant(c.clone());
            let y = g.matmul_t(x, w)?;
            weighted_sum(g, y, 3)
        });
    }
    case!("transpose", vec![2, 3], |g: &mut Graph, x| {
        let y = g.transpose(x)?;
        weighted_sum(g, y, 4)
    });
    {
        let r = row3.clone();
        case!("add_broadcast", vec![2, 3], move |g: &mut Graph, x| {
            let b = g.leaf(r.clone(), false);
            let y = g.add(x, b)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, 5)
        });
    }
    case!("add_bias_grad", vec![1, 3], |g: &mut Graph, b| {
        let x = g.constant(Tensor::from_rows(&[[0.2, 0.4, -0.1], [1.0, -0.3, 0.7]]));
        let y = g.add(x, b)?;
        let y = g.tanh(y)?;
        weighted_sum(g, y, 6)
    });
    {
        let o = other.clone();
        case!("sub", vec![2, 3], move |g: &mut Graph, x| {
            let b = g.constant(o.clone());
            let y = g.sub(b, x)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, 7)
        });
    }
    case!("mul", vec![2, 3], |g: &mut Graph, x| {
        let y = g.mul(x, x)?;
        weighted_sum(g, y, 8)
    });
    case!("mul_column_broadcast", vec![2, 1], |g: &mut Graph, x| {
        let m = g.constant(Tensor::from_rows(&[[0.2, 0.4, -0.1], [1.0, -0.3, 0.7]]));
        let y = g.mul(m, x)?;
        let y = g.tanh(y)?;
        weighted_sum(g, y, 9)
    });
    case!("scale_neg_add_scalar", vec![2, 3], |g: &mut Graph, x| {
        let y = g.scale(x, 1.7)?;
        let y = g.neg(y)?;
        let y = g.add_scalar(y, 0.3)?;
        let y = g.tanh(y)?;
        weighted_sum(g, y, 10)
    });
    {
        let c = c23.clone();
        case!("concat", vec![2, 2], move |g: &mut Graph, x| {
            let b = g.constant(c.clone());
            let y = g.concat(&[x, b, x])?;
            let y = g.tanh(y)?;
            weighted_sum(g, y, 11)
        });
    }
    case!("slice", vec![2, 5], |g: &mut Graph, x| {
        let y = g.slice(x, 1, 3)?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, 12)
    });
    case!("stack", vec![2, 3], |g: &mut Graph, x| {
        let t = g.tanh(x)?;
        let y = g.stack(&[x, t])?;
        weighted_sum(g, y, 13)
    });
    case!("select", vec![3, 2, 2], |g: &mut Graph, x| {
        let a = g.select(x, 1)?;
        let b = g.select(x, 2)?;
        let y = g.mul(a, b)?;
        weighted_sum(g, y, 33)
    });
    case!("tanh", vec![2, 3], |g: &mut Graph, x| {
        let y = g.tanh(x)?;
        weighted_sum(g, y, 14)
    });
    case!("sigmoid", vec![2, 3], |g: &mut Graph, x| {
        let y = g.sigmoid(x)?;
        weighted_sum(g, y, 15)
    });
    case!("exp", vec![2, 3], |g: &mut Graph, x| {
        let y = g.exp(x)?;
        weighted_sum(g, y, 16)
    });
    case!("log", vec![2, 3], |g: &mut Graph, x| {
        // log of a strictly positive transform
        let e = g.exp(x)?;
        let p = g.add_scalar(e, 0.5)?;
        let y = g.log(p)?;
        weighted_sum(g, y, 17)
    });
    case!("softmax_temperature", vec![2, 4], |g: &mut Graph, x| {
        let y = g.softmax(x, 0.7)?;
        weighted_sum(g, y, 18)
    });
    case!("log_softmax_temperature", vec![2, 4], |g: &mut Graph, x| {
        let y = g.log_softmax(x, 0.3)?;
        weighted_sum(g, y, 19)
    });
    case!("masked_softmax", vec![2, 4], |g: &mut Graph, x| {
        let mask = vec![true, true, false, true, true, false, false, true];
        let y = g.masked_softmax(x, mask)?;
        weighted_sum(g, y, 20)
    });
    case!("sum", vec![2, 3], |g: &mut Graph, x| {
        let y = g.mul(x, x)?;
        g.sum(y)
    });
    case!("mean", vec![2, 3], |g: &mut Graph, x| {
        let y = g.tanh(x)?;
        let y = g.mul(y, x)?;
        g.mean(y)
    });
    case!("sum_cols", vec![3, 4], |g: &mut Graph, x| {
        let y = g.sum_cols(x)?;
        let y = g.tanh(y)?;
        weighted_sum(g, y, 21)
    });
    {
        let o = other.clone();
        case!("cosine", vec![2, 3], move |g: &mut Graph, x| {
            let b = g.constant(o.clone());
            let y = g.cosine(x, b)?;
            weighted_sum(g, y, 22)
        });
    }
    case!("normalize", vec![2, 3], |g: &mut Graph, x| {
        let y = g.normalize(x)?;
        weighted_sum(g, y, 23)
    });
    case!("cross_entropy_from_log_probs", vec![3, 4], |g: &mut Graph, x| {
        let lp = g.log_softmax(x, 1.0)?;
        g.nll(lp, vec![0, 3, 1], vec![0.5, 1.0, 0.25])
    });
    case!("gather", vec![4, 3], |g: &mut Graph, x| {
        let y = g.gather(x, vec![2, 0, 2])?;
        let y = g.tanh(y)?;
        weighted_sum(g, y, 24)
    });
    {
        let c = cell.clone();
        case!("lstm_cell_gates", vec![2, 12], move |g: &mut Graph, z| {
            let cc = g.constant(c.clone());
            let y = g.lstm_cell(z, cc)?;
            weighted_sum(g, y, 25)
        });
    }
    case!("lstm_cell_state", vec![2, 3], |g: &mut Graph, c| {
        let z = g.constant(Tensor::from_rows(&[
            [0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 1.0, 0.2, -0.3],
            [0.3, 0.2, -0.1, -0.4, 0.6, 0.5, -0.7, 0.1, 0.9, -1.0, 0.4, 0.3],
        ]));
        let y = g.lstm_cell(z, c)?;
        weighted_sum(g, y, 26)
    });
    {
        let k = keys.clone();
        case!("attn_scores_query", vec![2, 3], move |g: &mut Graph, q| {
            let kk = g.constant(k.clone());
            let v = g.constant(Tensor::row(&[0.5, -1.0, 0.8]));
            let y = g.attn_scores(q, kk, v)?;
            weighted_sum(g, y, 27)
        });
    }
    case!("attn_scores_keys", vec![4, 2, 3], |g: &mut Graph, k| {
        let q = g.constant(Tensor::from_rows(&[[0.1, 0.2, -0.3], [0.5, -0.4, 0.2]]));
        let v = g.constant(Tensor::row(&[0.5, -1.0, 0.8]));
        let y = g.attn_scores(q, k, v)?;
        weighted_sum(g, y, 28)
    });
    {
        let k = keys.clone();
        case!("attn_scores_vector", vec![1, 3], move |g: &mut Graph, v| {
            let q = g.constant(Tensor::from_rows(&[[0.1, 0.2, -0.3], [0.5, -0.4, 0.2]]));
            let kk = g.constant(k.clone());
            let y = g.attn_scores(q, kk, v)?;
            weighted_sum(g, y, 29)
        });
    }
    {
        let vv = vals.clone();
        case!("attn_context_weights", vec![2, 3], move |g: &mut Graph, w| {
            let v = g.constant(vv.clone());
            let y = g.attn_context(w, v)?;
            weighted_sum(g, y, 30)
        });
    }
    case!("attn_context_values", vec![3, 2, 5], |g: &mut Graph, v| {
        let w = g.constant(Tensor::from_rows(&[[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]));
        let y = g.attn_context(w, v)?;
        weighted_sum(g, y, 31)
    });
    case!("linear", vec![2, 3], |g: &mut Graph, x| {
        let w = g.constant(Tensor::from_rows(&[[0.2, -0.5], [0.7, 0.1], [-0.3, 0.9]]));
        let b = g.constant(Tensor::row(&[0.1, -0.2]));
        let y = g.linear(x, w, b)?;
        weighted_sum(g, y, 32)
    });
    cases
}

/// Small model with large weights so attention gradients stay well above
/// finite-difference noise.
pub fn gradcheck_model(objective: Objective) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let words: Vec<String> = (0..5).map(|i| format!("w{i}")).collect();
    let rows = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let table = EmbeddingTable::from_rows(words, rows, true).unwrap();
    let cfg = ModelConfig {
        objective,
        input_dim: 2,
        enc_hidden: 2,
        dec_hidden: 3,
        attn_dim: 2,
        token_dim: 2,
        embed_dim: 3,
        init_scale: 2.0,
        temperature: 0.5,
        ..ModelConfig::default()
    };
    Model::new(cfg, table, Vocab::new(["x", "y", "z"]).unwrap(), 17).unwrap()
}

pub fn gradcheck_frames(t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![t, 2], (0..2 * t).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Two utterances of different lengths; the batch pads the shorter one.
pub fn gradcheck_batch() -> [Example; 2] {
    [
        Example { frames: gradcheck_frames(25, 1), source: vec![4, 6], target: vec![5, 4, 6, 5, 4] },
        Example { frames: gradcheck_frames(38, 2), source: vec![7, 5, 8], target: vec![6, 5, 4] },
    ]
}
