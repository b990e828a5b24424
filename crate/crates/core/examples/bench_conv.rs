//! Per-layer conv3d timing.
use crowd3d::tape::Tape;
use crowd3d::tensor::Tensor;
use std::time::Instant;

fn main() {
    let layers: &[(usize, usize)] = &[(24, 8), (8, 16), (16, 32), (32, 16), (16, 8), (8, 8), (8, 1)];
    let (d, h, w) = (7usize, 32usize, 32usize);
    let mut total_f = std::time::Duration::ZERO;
    let mut total_b = std::time::Duration::ZERO;
    for &(ci, co) in layers {
        let x = Tensor::new(vec![ci, d, h, w], vec![0.5; ci * d * h * w]).unwrap();
        let k = Tensor::new(vec![co, ci, 7, 5, 5], vec![0.01; co * ci * 175]).unwrap();
        let b = Tensor::zeros(&[co]);
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let mut xt = x.clone();
        xt.requires_grad = true;
        let xi = tape.leaf(xt);
        let mut kt = k.clone();
        kt.requires_grad = true;
        let ki = tape.leaf(kt);
        let mut bt = b.clone();
        bt.requires_grad = true;
        let bi = tape.leaf(bt);
        let y = tape.conv3d(xi, ki, bi).unwrap();
        let fwd = t0.elapsed();
        let s = tape.sum(y);
        let t1 = Instant::now();
        tape.backward(s);
        let bwd = t1.elapsed();
        println!("conv3d {ci:>2}->{co:>2}: fwd {fwd:>10.3?}  bwd {bwd:>10.3?}");
        total_f += fwd;
        total_b += bwd;
    }
    println!("total: fwd {total_f:?} bwd {total_b:?}");

    // 2D layers at 64x64 / 32x32 / 16x16
    let specs: &[(usize, usize, usize)] = &[
        (1, 4, 64), (4, 4, 64), (4, 8, 32), (8, 8, 32),
        (8, 16, 16), (16, 8, 16), (8, 1, 16),
    ];
    let t2 = Instant::now();
    for &(ci, co,س) in specs {
        let n = س;
        let x = Tensor::new(vec![ci, n, n], vec![0.5; ci * n * n]).unwrap();
        let k = Tensor::new(vec![co, ci, 5, 5], vec![0.01; co * ci * 25]).unwrap();
        let b = Tensor::zeros(&[co]);
        let mut tape = Tape::new();
        let mut xt = x;
        xt.requires_grad = true;
        let xi = tape.leaf(xt);
        let mut kt = k;
        kt.requires_grad = true;
        let ki = tape.leaf(kt);
        let bi = tape.leaf(b);
        let y = tape.conv2d(xi, ki, bi).unwrap();
        let s = tape.sum(y);
        tape.backward(s);
    }
    println!("all 2d convs fwd+bwd x1 view: {:?}", t2.elapsed());
}
