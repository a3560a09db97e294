//! End-to-end properties across modules.

use martinv_core::consistency::{certify, derive_payoff, ConsistencyOptions, Verdict, B0};
use martinv_core::families::{kimura_payoff, make_affine, make_example1, make_kimura};
use martinv_core::inversion::{invert_pricing, InversionGrid};
use martinv_core::kernels::SigmaTransform;
use martinv_core::sde_sim::{simulate_paths, SimOptions};

/// A consistent pair prices one underlying `X`: with `ṽ = Γ⁻¹∘v`, `h̃(t, A·m + B) = h(t, m)`.
#[test]
fn affine_pair_shares_its_solution() {
    let base = make_kimura(0.5, 1.0).unwrap();
    let image = make_affine(&base, 2.0, 1.0).unwrap();
    let (s1, s2) = (SigmaTransform::new(base.clone()), SigmaTransform::new(image.clone()));
    let cert = certify(&s1, &s2, B0::Fixed(0.0), &ConsistencyOptions::default()).unwrap();
    assert_eq!(cert.verdict, Verdict::Consistent, "{:?}", cert.notes);
    let gamma = cert.gamma.unwrap().gamma;
    let v = kimura_payoff().unwrap();
    let vt = derive_payoff(&gamma, &v).unwrap();
    let grid = InversionGrid { nt: 11, nx: 101, pad: 0 };
    let (a, b) = (invert_pricing(&base, &v, grid).unwrap(), invert_pricing(&image, &vt, grid).unwrap());
    for &t in &[0.0, 0.5, 0.9] {
        for &m in &[0.1, 0.4, 0.75] {
            let (x, xt) = (a.h.eval(t, m), b.h.eval(t, 2.0 * m + 1.0));
            assert!((x - xt).abs() < 1e-6, "t = {t}, m = {m}: {x} vs {xt}");
        }
    }
}

/// Same seed, same bundle; a different seed changes it.
#[test]
fn simulation_is_reproducible() {
    let fam = make_example1(&[1.0, 2.0], 1e-2, 1.0).unwrap();
    let opts = SimOptions::new(1.0, 1e-2, 64, 9);
    let (p, q) = (simulate_paths(&fam, &opts).unwrap(), simulate_paths(&fam, &opts).unwrap());
    assert_eq!(p.paths, q.paths);
    let r = simulate_paths(&fam, &SimOptions::new(1.0, 1e-2, 64, 10)).unwrap();
    assert_ne!(p.paths, r.paths);
}
