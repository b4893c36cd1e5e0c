//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

/// Textbook squash of one vector, no epsilon.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let q: f64 = s.iter().map(|v| v * v).sum();
    if q == 0.0 {
        return vec![0.0; s.len()];
    }
    let scale = q / (1.0 + q) / q.sqrt();
    s.iter().map(|v| v * scale).collect()
}

/// Routing by agreement with nested loops. `u[i][j][k]` is the prediction
/// of input `i` for output `j`. Returns the final coefficients and outputs.
pub fn route(u: &[Vec<Vec<f64>>], iterations: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n_in = u.len();
    let n_out = u[0].len();
    let d = u[0][0].len();
    let mut b = vec![vec![0.0; n_out]; n_in];
    let mut c = vec![vec![0.0; n_out]; n_in];
    let mut v = vec![vec![0.0; d]; n_out];
    for it in 0..iterations {
        for i in 0..n_in {
            let m = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = b[i].iter().map(|x| (x - m).exp()).sum();
            for j in 0..n_out {
                c[i][j] = (b[i][j] - m).exp() / z;
            }
        }
        for j in 0..n_out {
            let mut s = vec![0.0; d];
            for i in 0..n_in {
                for k in 0..d {
                    s[k] += c[i][j] * u[i][j][k];
                }
            }
            v[j] = squash(&s);
        }
        if it + 1 < iterations {
            for i in 0..n_in {
                for j in 0..n_out {
                    let mut a = 0.0;
                    for k in 0..d {
                        a += u[i][j][k] * v[j][k];
                    }
                    b[i][j] += a;
                }
            }
        }
    }
    (c, v)
}

/// CFC pre-activations by slicing each window out of `x[c][y][x]` and
/// applying its own affine map. `w[m][o][idx]` with `idx = c*K*K + dy*K + dx`.
pub fn cfc(x: &[Vec<Vec<f64>>], w: &[Vec<Vec<f64>>], b: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let width = x[0].len();
    let side = width - k + 1;
    let mut out = Vec::new();
    for h in 0..side {
        for ww in 0..side {
            let m = h * side + ww;
            let mut window = Vec::new();
            for ch in x.iter().take(n) {
                for dy in 0..k {
                    for dx in 0..k {
                        window.push(ch[h + dy][ww + dx]);
                    }
                }
            }
            let caps: Vec<f64> = w[m]
                .iter()
                .zip(&b[m])
                .map(|(row, bias)| row.iter().zip(&window).map(|(a, z)| a * z).sum::<f64>() + bias)
                .collect();
            out.push(caps);
        }
    }
    out
}

/// Direct valid convolution, `x[c][y][x]`, `w[o][c][dy][dx]`, stride 1.
pub fn conv(x: &[Vec<Vec<f64>>], w: &[Vec<Vec<Vec<f64>>>]) -> Vec<Vec<Vec<f64>>> {
    let k = w[0][0].len();
    let side = x[0].len() - k + 1;
    w.iter()
        .map(|wo| {
            (0..side)
                .map(|y| {
                    (0..side)
                        .map(|xx| {
                            let mut a = 0.0;
                            for (c, wc) in wo.iter().enumerate() {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        a += wc[dy][dx] * x[c][y + dy][xx + dx];
                                    }
                                }
                            }
                            a
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Small-integer values so that every sum is exact in `f64`.
pub fn int_values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) % 7) as f64 - 3.0
        })
        .collect()
}

pub fn nest3(flat: &[f64], a: usize, b: usize, c: usize) -> Vec<Vec<Vec<f64>>> {
    (0..a)
        .map(|i| (0..b).map(|j| flat[(i * b + j) * c..(i * b + j + 1) * c].to_vec()).collect())
        .collect()
}

/// `DATA_DIR`, else the workspace `data/` directory.
pub fn data_dir() -> std::path::PathBuf {
    std::env::var_os("DATA_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

/// MNIST split, or `None` (with a note on stderr) when the files are absent.
pub fn mnist(split: capsnet::data::Split) -> Option<capsnet::data::Dataset> {
    match capsnet::data::DatasetKind::Mnist.load(&data_dir(), split) {
        Ok(ds) => Some(ds),
        Err(e) => {
            eprintln!("MNIST unavailable under {}: {e}", data_dir().display());
            None
        }
    }
}
