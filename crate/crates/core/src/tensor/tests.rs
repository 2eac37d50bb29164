use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = Graph<'static>;

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn gradcheck(build: &Build, shapes: &[Vec<usize>], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
        .iter()
        .map(|s| (s.clone(), random(s.iter().product(), &mut rng)))
        .collect();
    let weights = random(4096, &mut rng);
    let r = gradient_check(build, &inputs, &weights, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_matmul() {
    gradcheck(&|t, v| t.matmul(v[0], v[1]), &[vec![2, 3, 4], vec![4, 5]], 1);
}

#[test]
fn grad_bmm() {
    gradcheck(&|t, v| t.bmm(v[0], v[1], false), &[vec![2, 3, 4], vec![2, 4, 5]], 2);
    gradcheck(&|t, v| t.bmm(v[0], v[1], true), &[vec![2, 3, 4], vec![2, 5, 4]], 3);
}

#[test]
fn grad_bmm_shared_operand() {
    gradcheck(&|t, v| t.bmm(v[0], v[0], true), &[vec![2, 3, 4]], 4);
}

#[test]
fn grad_permute_reshape_transpose() {
    gradcheck(&|t, v| t.permute(v[0], &[2, 0, 1]), &[vec![2, 3, 4]], 5);
    gradcheck(
        &|t, v| {
            let r = t.reshape(v[0], &[6, 4])?;
            t.transpose(r, 0, 1)
        },
        &[vec![2, 3, 4]],
        6,
    );
}

#[test]
fn grad_elementwise() {
    gradcheck(&|t, v| t.add(v[0], v[1]), &[vec![3, 4], vec![3, 4]], 7);
    gradcheck(&|t, v| t.mul(v[0], v[1]), &[vec![3, 4], vec![3, 4]], 8);
    gradcheck(&|t, v| t.mul(v[0], v[0]), &[vec![3, 4]], 9);
    gradcheck(&|t, v| t.add_bias(v[0], v[1]), &[vec![2, 3, 4], vec![4]], 10);
    gradcheck(&|t, v| t.scale(v[0], -0.7), &[vec![5]], 11);
    gradcheck(&|t, v| t.relu(v[0]), &[vec![4, 4]], 12);
}

#[test]
fn grad_softmax_each_axis() {
    for axis in 0..3 {
        gradcheck(&move |t, v| t.softmax(v[0], axis), &[vec![2, 3, 4]], 13 + axis as u64);
    }
}

#[test]
fn grad_layernorm_each_axis() {
    gradcheck(&|t, v| t.layernorm(v[0], v[1], v[2], 2), &[vec![2, 3, 4], vec![4], vec![4]], 20);
    gradcheck(&|t, v| t.layernorm(v[0], v[1], v[2], 1), &[vec![2, 3, 4], vec![3], vec![3]], 21);
}

#[test]
fn grad_mean_pool() {
    for axis in 0..3 {
        gradcheck(&move |t, v| t.mean_pool(v[0], axis), &[vec![2, 3, 4]], 30 + axis as u64);
    }
}

#[test]
fn grad_embed_with_repeats() {
    gradcheck(&|t, v| t.embed(v[0], &[2, 0, 2, 4]), &[vec![5, 3]], 40);
}

#[test]
fn grad_concat() {
    gradcheck(&|t, v| t.concat(&[v[0], v[1]], 1), &[vec![2, 3, 4], vec![2, 1, 4]], 41);
    gradcheck(&|t, v| t.concat(&[v[0], v[1], v[0]], 0), &[vec![2, 3], vec![1, 3]], 42);
}

#[test]
fn grad_mask_fill() {
    gradcheck(
        &|t, v| t.mask_fill(v[0], &[true, false, false, true], -3.0),
        &[vec![3, 2, 2]],
        43,
    );
}

#[test]
fn grad_cross_entropy_ignores_padding() {
    gradcheck(
        &|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(3)]),
        &[vec![3, 5]],
        44,
    );
}

#[test]
fn grad_attention_block() {
    // softmax(q kᵀ / √d) v with a causal mask
    gradcheck(
        &|t, v| {
            let s = t.bmm(v[0], v[1], true)?;
            let s = t.scale(s, 0.5)?;
            let mask: Vec<bool> = (0..9).map(|i| i % 3 > i / 3).collect();
            let s = t.mask_fill(s, &mask, -1e9)?;
            let p = t.softmax(s, 2)?;
            t.bmm(p, v[2], false)
        },
        &[vec![2, 3, 4], vec![2, 3, 4], vec![2, 3, 4]],
        45,
    );
}

#[test]
fn matmul_matches_naive_oracle_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let (r, k, m) = (7, 5, 3);
    let a: Vec<f32> = (0..r * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::<f32>::new();
    let va = tape.constant(&[r, k], a.clone()).unwrap();
    let vb = tape.constant(&[k, m], b.clone()).unwrap();
    let out = tape.matmul(va, vb).unwrap();
    for i in 0..r {
        for j in 0..m {
            let want: f32 = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
            assert!((tape.value(out)[i * m + j] - want).abs() < 1e-5);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&[2, 3], vec![1000.0, 0.0, -5.0, 1.0, 2.0, 3.0]).unwrap();
    let y = tape.softmax(x, 1).unwrap();
    for row in tape.value(y).chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layernorm_output_is_standardised() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&[1, 4], vec![1.0, 2.0, 3.0, 10.0]).unwrap();
    let g = tape.constant(&[4], vec![1.0; 4]).unwrap();
    let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
    let y = tape.layernorm(x, g, b, 1).unwrap();
    let v = tape.value(y);
    let mean: f64 = v.iter().sum::<f64>() / 4.0;
    let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-5);
}

#[test]
fn cross_entropy_value_matches_oracle() {
    let logits = [0.5, -1.0, 2.0, 0.0, 0.0, 0.0];
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&[2, 3], logits.to_vec()).unwrap();
    let l = tape.cross_entropy(x, &[Some(2), Some(0)]).unwrap();
    let lse0 = (0.5f64.exp() + (-1.0f64).exp() + 2.0f64.exp()).ln();
    let want = ((lse0 - 2.0) + 3.0f64.ln()) / 2.0;
    assert!((tape.value(l)[0] - want).abs() < 1e-12);
}

#[test]
fn dropout_is_identity_at_eval_and_unbiased_in_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&[20000], vec![1.0; 20000]).unwrap();
    let y = tape.dropout(x, 0.3, false, &mut rng).unwrap();
    assert_eq!(x, y);
    let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
    let v = tape.value(y);
    let zeros = v.iter().filter(|x| **x == 0.0).count() as f64 / v.len() as f64;
    assert!((zeros - 0.3).abs() < 0.02);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean - 1.0).abs() < 0.03);
}

#[test]
fn error_paths() {
    let mut tape = Tape::<f64>::new();
    let a = tape.variable(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.variable(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { op: "matmul", .. })));
    assert!(matches!(tape.reshape(a, &[4]), Err(TensorError::Shape { .. })));
    assert!(matches!(tape.permute(a, &[0, 0]), Err(TensorError::Shape { .. })));
    assert!(matches!(tape.embed(a, &[2]), Err(TensorError::Index { .. })));
    assert!(matches!(tape.cross_entropy(a, &[None, None]), Err(TensorError::EmptyAxis { .. })));
    assert!(tape.constant(&[3], vec![0.0; 2]).is_err());
    assert!(matches!(tape.backward(a), Err(TensorError::NonScalarLoss(_))));
    let s = tape.sum(a).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(TensorError::Consumed)));
}

#[test]
fn non_finite_values_are_caught() {
    let mut tape = Tape::<f64>::new();
    let a = tape.variable(&[2], vec![f64::MAX, f64::MAX]).unwrap();
    assert!(matches!(tape.add(a, a), Err(TensorError::NonFinite { op: "add" })));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.variable(&[2], vec![1.0, 2.0]).unwrap();
    let c = tape.constant(&[2], vec![3.0, 4.0]).unwrap();
    let p = tape.mul(a, c).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn params_flow_through_store() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", &[2], vec![1.0, -2.0]).unwrap();
    assert!(store.add("w", &[1], vec![0.0]).is_err());
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        tape.accumulate_param_grads(&mut store);
    }
    // two accumulated passes of 2w
    assert_eq!(store.get(w).grad, vec![4.0, -8.0]);
    let n = store.clip_grad_norm(1.0);
    assert!((n - 80f64.sqrt()).abs() < 1e-12);
    assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    store.zero_grad();
    assert_eq!(store.grad_norm(), 0.0);
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", &[3], vec![2.0, -1.0, 0.5]).unwrap();
    let target = [0.3f32, 0.7, -0.2];
    let cfg = AdamConfig::default();
    for step in 1..=2000 {
        store.zero_grad();
        let p = store.get_mut(w);
        for i in 0..3 {
            p.grad[i] = 2.0 * (p.value[i] - target[i]);
        }
        adam_step(&mut store, 1e-2, &cfg, step);
    }
    for (v, t) in store.get(w).value.iter().zip(target) {
        assert!((v - t).abs() < 1e-3, "{v} vs {t}");
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", &[2], vec![0.0, 0.0]).unwrap();
    store.get_mut(w).grad = vec![5.0, -0.01];
    adam_step(&mut store, 0.1, &AdamConfig::default(), 1);
    let v = &store.get(w).value;
    assert!((v[0] + 0.1).abs() < 1e-6 && (v[1] - 0.1).abs() < 1e-4);
}

#[test]
fn cast_preserves_values_and_names() {
    let mut store = ParamStore::<f32>::new();
    store.add("a.b", &[2, 1], vec![0.25, -1.5]).unwrap();
    let wide: ParamStore<f64> = store.cast();
    let id = wide.id("a.b").unwrap();
    assert_eq!(wide.get(id).value, vec![0.25, -1.5]);
    assert_eq!(wide.get(id).shape, vec![2, 1]);
}
