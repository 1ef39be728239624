use muster_core::attention::{light_attention, w_mska, w_mska_map, sw_mska, LightAttnParams, MskaParams, RelPosBias};
use muster_core::oracle::{msa_reference, scalar_attention, ScalarAttention};
use muster_core::windowing::{build_light_sw_mask, build_sw_mask, AttentionMask, MaskId, WindowGrid};
use muster_core::{Rng, Tensor};

fn visibility(mask: &AttentionMask) -> Vec<bool> {
    let (q, k) = (mask.query_tokens(), mask.key_tokens());
    (0..q * k).map(|i| mask.is_visible(i / k, i % k)).collect()
}

fn mska_oracle(f: &Tensor<f64>, m: &Tensor<f64>, p: &MskaParams<f64>, mask: Option<&AttentionMask>) -> Tensor<f64> {
    let bias = p.rel_pos.matrix();
    let vis = mask.map(visibility);
    scalar_attention(
        f,
        m,
        &ScalarAttention {
            heads: p.heads,
            w_q: &p.w_q,
            w_k: Some(&p.w_k),
            w_v: Some(&p.w_v),
            w_o: Some(&p.w_o),
            scaled: true,
            inner: Some(&bias),
            outer: None,
            visible: vis.as_deref(),
        },
    )
}

fn light_oracle(x: &Tensor<f64>, kv: &Tensor<f64>, p: &LightAttnParams<f64>, mask: Option<&AttentionMask>) -> Tensor<f64> {
    let vis = mask.map(visibility);
    scalar_attention(
        x,
        kv,
        &ScalarAttention {
            heads: p.heads,
            w_q: &p.w_q,
            w_k: None,
            w_v: None,
            w_o: None,
            scaled: false,
            inner: Some(&p.inner_bias),
            outer: Some(&p.outer_bias),
            visible: vis.as_deref(),
        },
    )
}

fn random_mska(c: usize, heads: usize, m: usize, rng: &mut Rng) -> MskaParams<f64> {
    let mut w = || rng.normal_tensor(&[c, c], 0.0, 0.5);
    let (q, k, v, o) = (w(), w(), w(), w());
    let table = rng.normal_tensor(&[(2 * m - 1).pow(2), heads], 0.0, 0.5);
    MskaParams::new(q, k, v, o, RelPosBias::new(table, m).unwrap()).unwrap()
}

fn random_light(c: usize, heads: usize, m: usize, rng: &mut Rng) -> LightAttnParams<f64> {
    let (q, k) = (m * m, (m / 2).pow(2));
    LightAttnParams::new(
        rng.normal_tensor(&[c, c], 0.0, 0.5),
        rng.normal_tensor(&[2, 2, c], 0.25, 0.1),
        rng.normal_tensor(&[c], 0.0, 0.1),
        rng.normal_tensor(&[heads, q, k], 0.0, 0.5),
        rng.normal_tensor(&[heads, q, k], 0.0, 0.1),
    )
    .unwrap()
}

#[test]
fn w_mska_matches_scalar_loops() {
    let mut rng = Rng::new(21);
    for m in [2, 4] {
        for heads in [1, 2] {
            let p = random_mska(8, heads, m, &mut rng);
            let f = rng.normal_tensor(&[m * m, 8], 0.0, 1.0);
            let mw = rng.normal_tensor(&[m * m, 8], 0.0, 1.0);
            let set = build_sw_mask(&WindowGrid::new(2 * m, 2 * m, m, m / 2).unwrap()).unwrap();
            for mask in [None, Some(set.mask(MaskId::Corner)), Some(set.mask(MaskId::RightEdge))] {
                let got = w_mska(&f, &mw, &p, mask).unwrap();
                let want = mska_oracle(&f, &mw, &p, mask);
                assert!(got.max_abs_diff(&want) < 1e-9, "m={m} heads={heads}");
            }
        }
    }
}

#[test]
fn light_attention_matches_scalar_loops() {
    let mut rng = Rng::new(22);
    for heads in [1, 2] {
        let p = random_light(8, heads, 4, &mut rng);
        let x = rng.normal_tensor(&[16, 8], 0.0, 1.0);
        let kv = rng.normal_tensor(&[4, 8], 0.0, 1.0);
        let set = build_light_sw_mask(&WindowGrid::new(8, 8, 4, 2).unwrap()).unwrap();
        for mask in [None, Some(set.mask(MaskId::Corner)), Some(set.mask(MaskId::BottomEdge))] {
            let got = light_attention(&x, &kv, &p, mask).unwrap();
            assert!(got.max_abs_diff(&light_oracle(&x, &kv, &p, mask)) < 1e-9);
        }
    }
}

#[test]
fn mska_on_identical_operands_is_msa() {
    let mut rng = Rng::new(23);
    let p = random_mska(16, 4, 4, &mut rng);
    let x = rng.normal_tensor(&[16, 16], 0.0, 1.0);
    let got = w_mska(&x, &x, &p, None).unwrap();
    let want = msa_reference(&x, &p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.rel_pos.table, 4).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn attention_rows_sum_to_one() {
    // W_v = W_o = I with one-hot values exposes the attention matrix.
    let mut rng = Rng::new(24);
    let c = 16;
    let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let table = rng.normal_tensor(&[49, 1], 0.0, 1.0);
    let p = MskaParams::new(rng.normal_tensor(&[c, c], 0.0, 1.0), rng.normal_tensor(&[c, c], 0.0, 1.0), eye.clone(), eye.clone(), RelPosBias::new(table, 4).unwrap()).unwrap();
    let f = rng.normal_tensor(&[16, c], 0.0, 1.0);
    let out = w_mska(&f, &eye, &p, None).unwrap();
    for q in 0..16 {
        let s: f64 = (0..c).map(|k| out.get(&[q, k])).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn permuting_keys_with_mask_columns_changes_nothing() {
    let mut rng = Rng::new(25);
    let m = 4;
    let p = random_mska(8, 2, m, &mut rng);
    let p = MskaParams::new(p.w_q.clone(), p.w_k.clone(), p.w_v.clone(), p.w_o.clone(), RelPosBias::new(Tensor::zeros(&[49, 2]), m).unwrap()).unwrap();
    let f = rng.normal_tensor(&[16, 8], 0.0, 1.0);
    let mw = rng.normal_tensor(&[16, 8], 0.0, 1.0);
    let set = build_sw_mask(&WindowGrid::new(8, 8, m, 2).unwrap()).unwrap();
    let mask = set.mask(MaskId::Corner);
    let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
    let mw_p = Tensor::from_fn(&[16, 8], |i| mw.get(&[perm[i / 8], i % 8]));
    let mask_p = AttentionMask::from_visibility(16, 16, |q, k| mask.is_visible(q, perm[k])).unwrap();
    let a = w_mska(&f, &mw, &p, Some(mask)).unwrap();
    let b = w_mska(&f, &mw_p, &p, Some(&mask_p)).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn light_reduces_to_plain_attention() {
    // Zero biases, identity W_q and full-resolution keys: unscaled
    // single-projection attention.
    let mut rng = Rng::new(26);
    let (t, c, heads) = (16, 8, 2);
    let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let p = LightAttnParams::new(eye.clone(), Tensor::full(&[2, 2, c], 0.25), Tensor::zeros(&[c]), Tensor::zeros(&[heads, t, t]), Tensor::zeros(&[heads, t, t])).unwrap();
    let x = rng.normal_tensor(&[t, c], 0.0, 1.0);
    let kv = rng.normal_tensor(&[t, c], 0.0, 1.0);
    let got = light_attention(&x, &kv, &p, None).unwrap();
    let want = scalar_attention(&x, &kv, &ScalarAttention { heads, w_q: &eye, w_k: None, w_v: None, w_o: None, scaled: false, inner: None, outer: None, visible: None });
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn outer_bias_routes_masked_values() {
    let mut rng = Rng::new(27);
    let (c, heads) = (4, 1);
    let mut p = random_light(c, heads, 4, &mut rng);
    p.outer_bias = Tensor::zeros(&[1, 16, 4]);
    let mask = AttentionMask::from_visibility(16, 4, |_, k| k != 0).unwrap();
    let x = rng.normal_tensor(&[16, c], 0.0, 1.0);
    let kv = rng.normal_tensor(&[4, c], 0.0, 1.0);
    let mut kv2 = kv.clone();
    for ch in 0..c {
        kv2.set(&[0, ch], kv.get(&[0, ch]) + 1.0);
    }
    let a = light_attention(&x, &kv, &p, Some(&mask)).unwrap();
    let b = light_attention(&x, &kv2, &p, Some(&mask)).unwrap();
    assert_eq!(a, b, "masked key leaked through the softmax");
    p.outer_bias = Tensor::from_fn(&[1, 16, 4], |i| if i % 4 == 0 { 0.5 } else { 0.0 });
    let a = light_attention(&x, &kv, &p, Some(&mask)).unwrap();
    let b = light_attention(&x, &kv2, &p, Some(&mask)).unwrap();
    for v in b.data().iter().zip(a.data()).map(|(b, a)| b - a) {
        assert!((v - 0.5).abs() < 1e-12);
    }
    assert!(a.max_abs_diff(&light_oracle(&x, &kv, &p, Some(&mask))) < 1e-12);
}

#[test]
fn sw_mska_is_shift_window_attention_unshift() {
    use muster_core::windowing::{cyclic_shift, cyclic_shift_inverse, window_partition, window_reverse};
    let mut rng = Rng::new(28);
    let p = random_mska(8, 2, 4, &mut rng);
    let f = rng.normal_tensor(&[8, 8, 8], 0.0, 1.0);
    let m = rng.normal_tensor(&[8, 8, 8], 0.0, 1.0);
    let grid = WindowGrid::new(8, 8, 4, 2).unwrap();
    let set = build_sw_mask(&grid).unwrap();
    let fw = window_partition(&cyclic_shift(&f, 2).unwrap(), 4).unwrap();
    let mw = window_partition(&cyclic_shift(&m, 2).unwrap(), 4).unwrap();
    let mut out = Vec::new();
    for win in 0..4 {
        let take = |t: &Tensor<f64>| Tensor::new(&[16, 8], t.data()[win * 128..(win + 1) * 128].to_vec()).unwrap();
        out.extend(w_mska(&take(&fw), &take(&mw), &p, Some(set.for_window(win))).unwrap().into_data());
    }
    let manual = cyclic_shift_inverse(&window_reverse(&Tensor::new(&[4, 16, 8], out).unwrap(), 8, 8).unwrap(), 2).unwrap();
    assert!(sw_mska(&f, &m, &p, &grid).unwrap().max_abs_diff(&manual) < 1e-12);

    let plain = w_mska_map(&f, &m, &p).unwrap();
    let first = w_mska(&take_window(&f), &take_window(&m), &p, None).unwrap();
    assert!(take_window(&plain).max_abs_diff(&first) < 1e-12);
}

fn take_window(x: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(&[16, 8], |i| x.get(&[i / 32, (i / 8) % 4, i % 8]))
}
