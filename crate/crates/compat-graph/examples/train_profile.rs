use std::collections::HashSet;
use std::time::Instant;

use compat_graph::graph::{self, Graph, NormalizedAdjacency};
use compat_graph::io::{load_edges, load_features};
use compat_graph::numeric::Matrix;
use compat_graph::trainer::standardize_features;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let x = load_features("/tmp/trend/data/features.txt").unwrap();
    let edges = load_edges("/tmp/trend/data/edges.txt").unwrap();
    let g = Graph::build(x.rows(), &edges).unwrap();
    let (x_std, _) = standardize_features(&x);
    let mut rng = ChaCha20Rng::seed_from_u64(0);

    // mimic one training iteration piece by piece
    let n = g.num_nodes();
    let hidden = 350;
    let adj0 = NormalizedAdjacency::identity(n);
    let theta_a = Matrix::from_vec(32, hidden, (0..32 * hidden).map(|_| rng.gen_range(-0.1..0.1)).collect());
    let theta_b = Matrix::from_vec(hidden, hidden, (0..hidden * hidden).map(|_| rng.gen_range(-0.1..0.1)).collect());
    let z = Matrix::from_vec(n, hidden, (0..n * hidden).map(|_| rng.gen_range(-1.0..1.0)).collect());

    let reps = 30;

    let t = Instant::now();
    for _ in 0..reps {
        let pool = g.edges();
        let picked = rand::seq::index::sample(&mut rng, pool.len(), 1900);
        let removed: HashSet<(usize, usize)> = picked.iter().map(|i| pool[i]).collect();
        let mg = g.remove_edges(&removed);
        let mg = graph::node_edge_dropout(&mg, 0.15, &mut rng);
        let _adj1 = NormalizedAdjacency::self_loop_normalized(&mg);
        let _split = graph::split_edges(&g, 0.13, 1.0, &mut rng).unwrap();
    }
    println!("graph work/iter: {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = z.matmul(&theta_b).unwrap();
    }
    println!("2000x350x350 gemm: {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = x_std.matmul(&theta_a).unwrap();
    }
    println!("2000x32x350 gemm: {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    let adj1 = NormalizedAdjacency::self_loop_normalized(&g);
    for _ in 0..reps {
        let _ = adj1.matmul(&z).unwrap();
    }
    println!("spmm: {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = adj0.matmul(&z).unwrap();
    }
    println!("identity spmm: {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let mut tape = compat_graph::numeric::Tape::new();
        let zi = tape.constant(z.clone());
        let _ = tape.dropout(zi, 0.5, &mut rng);
    }
    println!("dropout node (incl clone): {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let mut tape = compat_graph::numeric::Tape::new();
        let zi = tape.constant(z.clone());
        let gi = tape.constant(Matrix::from_vec(1, hidden, vec![1.0; hidden]));
        let bi = tape.constant(Matrix::from_vec(1, hidden, vec![0.0; hidden]));
        let _ = tape.batchnorm_batch(zi, gi, bi, 1e-5).unwrap();
    }
    println!("batchnorm node (incl clone): {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = z.clone();
    }
    println!("bare 2000x350 clone: {:.4} s", t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = z.transpose();
    }
    println!("2000x350 transpose: {:.4} s", t.elapsed().as_secs_f64() / reps as f64);
}
