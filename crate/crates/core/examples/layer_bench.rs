//! Times forward and backward of each backbone layer at one input size.

use std::time::Instant;

use zoomiqa::ndgrad::{Conv2dSpec, Tape, Tensor};

fn main() -> zoomiqa::Result<()> {
    zoomiqa::retain_heap();
    let side: usize = std::env::args().nth(1).map_or(384, |s| s.parse().unwrap());
    let batch = 16;
    let layers: Vec<(&str, usize, usize, usize, usize, Conv2dSpec)> = vec![
        ("stem", 3, 16, 3, side, Conv2dSpec { stride: 2, padding: 1, groups: 1 }),
        ("dw1", 16, 16, 3, side / 2, Conv2dSpec { stride: 2, padding: 1, groups: 16 }),
        ("pw1", 16, 32, 1, side / 4, Conv2dSpec::default()),
        ("dw2", 32, 32, 3, side / 4, Conv2dSpec { stride: 2, padding: 1, groups: 32 }),
        ("pw2", 32, 64, 1, side / 8, Conv2dSpec::default()),
        ("dw3", 64, 64, 3, side / 8, Conv2dSpec { stride: 2, padding: 1, groups: 64 }),
        ("pw3", 64, 128, 1, side / 16, Conv2dSpec::default()),
    ];
    for (name, cin, cout, k, s, spec) in layers {
        let cin_g = cin / spec.groups;
        let x = Tensor::new(vec![batch, cin, s, s], vec![0.1f32; batch * cin * s * s])?;
        // The network input never needs a gradient.
        let x = if name == "stem" { x } else { x.with_grad() };
        let w = Tensor::new(vec![cout, cin_g, k, k], vec![0.01f32; cout * cin_g * k * k])?.with_grad();
        let b = Tensor::<f32>::zeros(&[cout]).with_grad();
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x)?, tape.leaf(&w)?, tape.leaf(&b)?);
        let y = tape.conv2d(xv, wv, bv, spec)?;
        let r = tape.relu(y);
        let l = tape.reduce_sum(r)?;
        let t1 = Instant::now();
        tape.backward(l)?;
        let t2 = Instant::now();
        println!("{name:>5}: fwd {:>7.1} ms  bwd {:>7.1} ms", (t1 - t0).as_secs_f64() * 1e3, (t2 - t1).as_secs_f64() * 1e3);
    }
    Ok(())
}
