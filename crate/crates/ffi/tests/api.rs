use std::ffi::{CStr, CString};
use std::ptr;

use poisson_chaos_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pc_last_error()).to_string_lossy().into_owned() }
}

fn data(rel: &str) -> CString {
    let p = format!("{}/../../data/{rel}", env!("CARGO_MANIFEST_DIR"));
    CString::new(p).unwrap()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(pc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn contraction_of_shipped_pair_is_eleven() {
    unsafe {
        let (mut f, mut g, mut c) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
        assert_eq!(pc_kernel_read(data("kernels/f1.toml").as_ptr(), &mut f), PcStatus::Ok);
        // a kernel read on its own gets its own space, so rebuild g on f's
        let w = [1.0, 1.0];
        let mut s = ptr::null_mut();
        assert_eq!(pc_space_new(w.as_ptr(), 2, &mut s), PcStatus::Ok);
        let (fv, gv) = ([1.0, 2.0], [3.0, 4.0]);
        pc_kernel_free(f);
        assert_eq!(pc_kernel_new(s, 1, fv.as_ptr(), 2, &mut f), PcStatus::Ok);
        assert_eq!(pc_kernel_new(s, 1, gv.as_ptr(), 2, &mut g), PcStatus::Ok);
        assert_eq!(pc_star_contract(f, g, 1, 1, &mut c), PcStatus::Ok);
        assert_eq!(pc_kernel_order(c), 0);
        let mut v = [0.0];
        assert_eq!(pc_kernel_values(c, v.as_mut_ptr(), 1), PcStatus::Ok);
        assert_eq!(v[0], 11.0);
        let mut n = 0.0;
        assert_eq!(pc_contraction_norm(f, g, 1, 1, &mut n), PcStatus::Ok);
        assert_eq!(n, 11.0);
        pc_kernel_free(c);
        pc_kernel_free(g);
        pc_kernel_free(f);
        pc_space_free(s);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    unsafe {
        let mut s = ptr::null_mut();
        let bad = [1.0, -1.0];
        assert_eq!(pc_space_new(bad.as_ptr(), 2, &mut s), PcStatus::InvalidArgument);
        assert!(s.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(pc_space_new(ptr::null(), 3, &mut s), PcStatus::NullPointer);
        assert!(last_error().contains("weights"));

        let mut k = ptr::null_mut();
        let missing = CString::new("/nonexistent/kernel.toml").unwrap();
        assert_eq!(pc_kernel_read(missing.as_ptr(), &mut k), PcStatus::File);

        let mut c = ptr::null_mut();
        let asym = [1.0, 2.0, 0.0, 1.0];
        assert_eq!(pc_cov_new(2, asym.as_ptr(), &mut c), PcStatus::InvalidArgument);

        let w = [1.0, 1.0];
        assert_eq!(pc_space_new(w.as_ptr(), 2, &mut s), PcStatus::Ok);
        assert!(last_error().is_empty());
        let v = [0.0, 1.0, 2.0, 0.0];
        assert_eq!(pc_kernel_new(s, 2, v.as_ptr(), 4, &mut k), PcStatus::Ok);
        let mut e = ptr::null_mut();
        assert_eq!(pc_expansion_new(s, 0.0, [k as *const PcKernel].as_ptr(), 1, &mut e), PcStatus::NotSymmetric);
        let mut sym = ptr::null_mut();
        assert_eq!(pc_symmetrize(k, &mut sym), PcStatus::Ok);
        assert_eq!(pc_expansion_new(s, 0.0, [sym as *const PcKernel].as_ptr(), 1, &mut e), PcStatus::Ok);
        pc_expansion_free(e);
        pc_kernel_free(sym);
        pc_kernel_free(k);
        pc_space_free(s);

        // freeing null is a no-op
        pc_kernel_free(ptr::null_mut());
        assert!(pc_kernel_norm(ptr::null()).is_nan());
    }
}

#[test]
fn first_chaos_bound_and_simulation() {
    unsafe {
        let mut e = ptr::null_mut();
        assert_eq!(pc_expansion_read(data("examples/singular_target/x.toml").as_ptr(), &mut e), PcStatus::Ok);
        let var = pc_expansion_variance(e);
        let mut c = ptr::null_mut();
        assert_eq!(pc_cov_new(1, [var].as_ptr(), &mut c), PcStatus::Ok);
        let list = [e as *const PcExpansion];
        let mut r = ptr::null_mut();
        assert_eq!(pc_bound_d3(list.as_ptr(), 1, c, PcMode::Analytic, 0, 0, &mut r), PcStatus::Ok);
        assert!(pc_report_d3(r) > 0.0);
        assert!(pc_report_term_sq_sum(r).abs() < 1e-20);
        let mut d2 = 0.0;
        assert_eq!(pc_report_d2(r, &mut d2), PcStatus::Ok);
        assert!(d2 > 0.0);
        pc_report_free(r);

        let zero = [0.0];
        let mut singular = ptr::null_mut();
        assert_eq!(pc_cov_new(1, zero.as_ptr(), &mut singular), PcStatus::Ok);
        assert_eq!(pc_bound_d3(list.as_ptr(), 1, singular, PcMode::Analytic, 0, 0, &mut r), PcStatus::Ok);
        assert_eq!(pc_report_d2(r, &mut d2), PcStatus::Undefined);
        pc_report_free(r);
        assert_eq!(
            pc_bound_d2(list.as_ptr(), 1, singular, PcMode::Analytic, 0, 0, &mut r),
            PcStatus::NotPositiveDefinite
        );

        let mut a = vec![0.0; 500];
        let mut b = vec![0.0; 500];
        assert_eq!(pc_simulate(list.as_ptr(), 1, 500, 7, a.as_mut_ptr(), 500), PcStatus::Ok);
        assert_eq!(pc_simulate(list.as_ptr(), 1, 500, 7, b.as_mut_ptr(), 500), PcStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(pc_simulate(list.as_ptr(), 1, 500, 7, b.as_mut_ptr(), 499), PcStatus::InvalidArgument);

        pc_cov_free(singular);
        pc_cov_free(c);
        pc_expansion_free(e);
    }
}

#[test]
fn ou_covariances() {
    unsafe {
        let l = [1.0, 4.0];
        let mut lim = [0.0; 4];
        assert_eq!(pc_ou_cov_limit(l.as_ptr(), 2, 0.0, PcWhich::A, lim.as_mut_ptr(), 4), PcStatus::Ok);
        assert!((lim[1] - 1.0).abs() < 1e-15);
        let mut v = 0.0;
        assert_eq!(pc_ou_cov_exact(l.as_ptr(), 2, 1e6, 0.0, PcWhich::A, 0, 1, &mut v), PcStatus::Ok);
        assert!((v - 1.0).abs() < 1e-5);
        assert_eq!(pc_ou_cov_limit(l.as_ptr(), 2, 0.0, PcWhich::Q, lim.as_mut_ptr(), 4), PcStatus::Ok);
        assert!((lim[0] - 3.0).abs() < 1e-15);
        assert_eq!(pc_ou_cov_exact(l.as_ptr(), 2, 10.0, 0.0, PcWhich::A, 2, 0, &mut v), PcStatus::InvalidArgument);
        assert_eq!(pc_ou_cov_exact(l.as_ptr(), 2, -1.0, 0.0, PcWhich::A, 0, 0, &mut v), PcStatus::InvalidArgument);
    }
}
