//! Primitive forwards against naive direct-summation references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stpnet_autodiff::reference::{max_abs_diff, naive_attention, naive_conv, naive_maxpool};
use stpnet_autodiff::{Conv2dSpec, Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dilations = [1, 2, 6, 12, 18];
    for case in 0..50 {
        let groups = [1, 2][case % 2];
        let depthwise = case % 5 == 4;
        let b = rng.gen_range(1..=2);
        let cin = if depthwise { 4 } else { groups * rng.gen_range(1..=2) };
        let cout = if depthwise { 4 } else { groups * rng.gen_range(1..=2) };
        let groups = if depthwise { 4 } else { groups };
        let h = rng.gen_range(3..=9);
        let w = rng.gen_range(3..=9);
        let k = [1, 3][rng.gen_range(0..2)];
        let dilation = dilations[case % dilations.len()];
        let padding = if k == 3 { [0, dilation][rng.gen_range(0..2)] } else { rng.gen_range(0..2) };
        let stride = rng.gen_range(1..=2);
        let spec = Conv2dSpec { stride, padding, dilation, groups };
        if spec.output_size(h, k).is_none() || spec.output_size(w, k).is_none() {
            continue;
        }
        let x = random(&mut rng, &[b, cin, h, w]);
        let wt = random(&mut rng, &[cout, cin / groups, k, k]);
        let bias = random(&mut rng, &[cout]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.constant(wt.clone()).unwrap();
        let bv = tape.constant(bias.clone()).unwrap();
        let y = tape.conv2d(xv, wv, Some(bv), spec).unwrap();
        let want = naive_conv(&x, &wt, Some(&bias), spec);
        assert!(max_abs_diff(tape.value(y), &want) <= 1e-6, "case {case}: {spec:?}");
    }
}

#[test]
fn ssm_dilations_on_stage_sized_maps() {
    // The dilation rates the spatial scale-aware block uses, on map sizes it sees.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &d in &[6, 12, 18] {
        for &hw in &[4, 8, 16, 32] {
            let x = random(&mut rng, &[1, 3, hw, hw]);
            let wt = random(&mut rng, &[2, 3, 3, 3]);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let wv = tape.constant(wt.clone()).unwrap();
            let y = tape.conv2d(xv, wv, None, Conv2dSpec::same3x3(d)).unwrap();
            assert_eq!(tape.shape(y), &[1, 2, hw, hw]);
            assert!(max_abs_diff(tape.value(y), &naive_conv(&x, &wt, None, Conv2dSpec::same3x3(d))) <= 1e-6);
        }
    }
}

#[test]
fn conv2d_matches_up_to_2x4x9x9() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let x = random(&mut rng, &[2, 4, 9, 9]);
        let wt = random(&mut rng, &[3, 4, 3, 3]);
        let spec = Conv2dSpec::same3x3(1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.constant(wt.clone()).unwrap();
        let y = tape.conv2d(xv, wv, None, spec).unwrap();
        assert!(max_abs_diff(tape.value(y), &naive_conv(&x, &wt, None, spec)) <= 1e-6);
    }
}

#[test]
fn maxpool_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..50 {
        let k = [2, 4][case % 2];
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), k * rng.gen_range(1..=4), k * rng.gen_range(1..=4)];
        let x = random(&mut rng, &shape);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.maxpool2d(xv, k).unwrap();
        assert!(max_abs_diff(tape.value(y), &naive_maxpool(&x, k)) <= 1e-6);
    }
}

#[test]
fn attention_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let b = rng.gen_range(1..=2);
        let t = rng.gen_range(1..=6);
        let dk = heads * rng.gen_range(1..=3);
        let dv = heads * rng.gen_range(1..=3);
        let (q, k, v) = (random(&mut rng, &[b, t, dk]), random(&mut rng, &[b, t, dk]), random(&mut rng, &[b, t, dv]));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()).unwrap(), tape.constant(k.clone()).unwrap(), tape.constant(v.clone()).unwrap());
        let a = tape.scaled_dot_attention(qv, kv, vv, heads).unwrap();
        assert!(max_abs_diff(tape.value(a.output), &naive_attention(&q, &k, &v, heads)) <= 1e-6);
        for row in tape.value(a.weights).data().chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut rng, &[2, 4, 9, 9]).cast::<f32>();
    let wt = random(&mut rng, &[8, 4, 3, 3]).cast::<f32>();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.constant(wt.clone()).unwrap();
        let y = tape.conv2d(xv, wv, None, Conv2dSpec::same3x3(2)).unwrap();
        let p = tape.maxpool2d(y, 3).unwrap();
        let s = tape.softmax(p, 1).unwrap();
        tape.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
