use std::ffi::{c_void, CStr};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sbmre_ffi::*;

extern "C" fn constant_one(_y: f64, _user: *mut c_void) -> f64 {
    1.0
}

extern "C" fn scaled_square(y: f64, user: *mut c_void) -> f64 {
    let k = unsafe { *(user as *const f64) };
    k * y * y
}

#[test]
fn field_steps_and_measures() {
    unsafe {
        let mut env = ptr::null_mut();
        assert_eq!(sbmre_env_new(64, 1.0, 3, &mut env), SbmreStatus::Ok);
        let (sites, counts) = ([0i64, 4], [60u64, 4]);
        let mut field = ptr::null_mut();
        assert_eq!(sbmre_field_new(sites.as_ptr(), counts.as_ptr(), 2, 9, &mut field), SbmreStatus::Ok);
        assert_eq!(sbmre_field_total_mass(field), 64);

        let mut mass = 0.0;
        assert_eq!(sbmre_field_measure_apply(field, 64, Some(constant_one), ptr::null_mut(), &mut mass), SbmreStatus::Ok);
        assert_eq!(mass, 1.0);
        let mut k = 2.0f64;
        let mut sq = 0.0;
        let user = (&mut k as *mut f64).cast();
        assert_eq!(sbmre_field_measure_apply(field, 64, Some(scaled_square), user, &mut sq), SbmreStatus::Ok);
        assert!((sq - 2.0 * 0.25 * 4.0 / 64.0).abs() < 1e-15);

        for _ in 0..10 {
            assert_eq!(sbmre_field_step(field, env), SbmreStatus::Ok);
        }
        assert_eq!(sbmre_field_step_index(field), 10);
        let occupied = sbmre_field_occupied(field);
        let mut written = 0usize;
        let (mut s, mut c) = (vec![0i64; occupied], vec![0u64; occupied]);
        if occupied > 0 {
            assert_eq!(
                sbmre_field_copy_counts(field, s.as_mut_ptr(), c.as_mut_ptr(), occupied - 1, &mut written),
                SbmreStatus::BufferTooSmall
            );
            assert_eq!(written, occupied);
        }
        assert_eq!(sbmre_field_copy_counts(field, s.as_mut_ptr(), c.as_mut_ptr(), occupied, &mut written), SbmreStatus::Ok);
        assert_eq!(c.iter().sum::<u64>(), sbmre_field_total_mass(field));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|x| x.rem_euclid(2) == 0));

        sbmre_field_free(field);
        sbmre_env_free(env);
    }
}

#[test]
fn same_seed_same_path() {
    let run = |seed| unsafe {
        let mut env = ptr::null_mut();
        sbmre_env_new(16, 1.0, 1, &mut env);
        let mut field = ptr::null_mut();
        sbmre_field_new([0i64].as_ptr(), [16u64].as_ptr(), 1, seed, &mut field);
        let mut masses = Vec::new();
        for _ in 0..20 {
            sbmre_field_step(field, env);
            masses.push(sbmre_field_total_mass(field));
        }
        sbmre_field_free(field);
        sbmre_env_free(env);
        masses
    };
    assert_eq!(run(5), run(5));
}

#[test]
fn oracles() {
    unsafe {
        assert!((sbmre_srw_pmf(4, 0) - 0.375).abs() < 1e-15);
        let mut v = 0.0;
        assert_eq!(sbmre_collision_pair(1, 0.25, &mut v), SbmreStatus::Ok);
        assert!((v - 1.125).abs() < 1e-15);
        assert_eq!(sbmre_pair_moment_exact(1, 0.25, &mut v), SbmreStatus::Ok);
        assert!((v - 1.25).abs() < 1e-15);
        assert_eq!(sbmre_collision_pair(3, -2.0, &mut v), SbmreStatus::InvalidArgument);
        assert_eq!(sbmre_gaussian_kernel(0.0, 1.0, 0.0, &mut v), SbmreStatus::Ok);
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert_eq!(sbmre_gaussian_kernel(0.0, 0.0, 0.0, &mut v), SbmreStatus::InvalidArgument);
        let mut row = SbmreAuditRow::default();
        assert_eq!(sbmre_audit_example(1.0, 256, &mut row), SbmreStatus::Ok);
        assert!((row.mean_m1 - 1.0).abs() < 1e-15 && (row.beta2_row - 1.0).abs() < 1e-12);
        assert!(!CStr::from_ptr(sbmre_version()).to_str().unwrap().is_empty());
    }
}

#[test]
fn spde_grid_heat_and_dual() {
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(
            sbmre_spde_grid_new(-5.0, 5.0, 0.1, 0.1 * 0.1, SbmreBoundary::Neumann, 0.0, 0.0, 1, &mut g),
            SbmreStatus::InvalidArgument
        );
        assert_eq!(
            sbmre_spde_grid_new(-5.0, 5.0, 0.1, 0.005, SbmreBoundary::Neumann, 0.0, 0.0, 1, &mut g),
            SbmreStatus::Ok
        );
        let n = sbmre_spde_grid_len(g);
        assert_eq!(n, 100);
        let init: Vec<f64> = (0..n).map(|i| if i == 50 { 10.0 } else { 0.0 }).collect();
        assert_eq!(sbmre_spde_grid_set_values(g, init.as_ptr(), n), SbmreStatus::Ok);
        assert_eq!(sbmre_spde_grid_set_values(g, init.as_ptr(), n - 1), SbmreStatus::InvalidArgument);
        assert_eq!(sbmre_spde_grid_step_forward(g, 100), SbmreStatus::Ok);
        let mut out = vec![0.0; n];
        assert_eq!(sbmre_spde_grid_values(g, out.as_mut_ptr(), n), SbmreStatus::Ok);
        // the heat scheme conserves mass under Neumann conditions
        assert!((out.iter().sum::<f64>() - 10.0).abs() < 1e-10);
        assert_eq!(sbmre_spde_grid_values(g, out.as_mut_ptr(), 3), SbmreStatus::BufferTooSmall);
        sbmre_spde_grid_free(g);

        let mut g = ptr::null_mut();
        assert_eq!(
            sbmre_spde_grid_new(-5.0, 5.0, 0.1, 0.005, SbmreBoundary::Dirichlet0, 1.0, 0.5, 2, &mut g),
            SbmreStatus::Ok
        );
        let init = vec![1.0; n];
        sbmre_spde_grid_set_values(g, init.as_ptr(), n);
        assert_eq!(sbmre_spde_grid_step_dual(g, 50), SbmreStatus::Ok);
        sbmre_spde_grid_values(g, out.as_mut_ptr(), n);
        assert!(out.iter().all(|v| v.is_finite() && *v >= 0.0));
        sbmre_spde_grid_free(g);
    }
}

#[test]
fn null_handles_are_harmless() {
    unsafe {
        sbmre_env_free(ptr::null_mut());
        sbmre_field_free(ptr::null_mut());
        sbmre_spde_grid_free(ptr::null_mut());
        assert_eq!(sbmre_env_sample_xi(ptr::null(), 0, 0), 0);
        assert_eq!(sbmre_field_total_mass(ptr::null()), 0);
        assert_eq!(sbmre_spde_grid_len(ptr::null()), 0);
        let mut v = 0.0;
        assert_eq!(
            sbmre_field_measure_apply(ptr::null(), 1, Some(constant_one), ptr::null_mut(), &mut v),
            SbmreStatus::NullPointer
        );
        let mut buf = [0 as std::ffi::c_char; 64];
        let len = sbmre_last_error(buf.as_mut_ptr(), buf.len());
        assert!(len > 0);
        assert!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap().contains("null"));
    }
}

fn header() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("sbmre.h")
}

#[test]
fn header_declares_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct SbmreEnv SbmreEnv",
        "typedef struct SbmreField SbmreField",
        "typedef struct SbmreSpdeGrid SbmreSpdeGrid",
        "SBMRE_STATUS_BUFFER_TOO_SMALL",
        "sbmre_env_new",
        "sbmre_field_measure_apply",
        "sbmre_spde_grid_step_dual",
        "sbmre_last_error",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else { return };
    if !cc.status.success() {
        return;
    }
    let dir = tempfile_dir();
    let src = dir.join("probe.c");
    std::fs::write(
        &src,
        "#include \"sbmre.h\"\nint probe(void) { SbmreEnv *e = 0; SbmreStatus s = sbmre_env_new(16, 1.0, 1, &e);\n\
         sbmre_env_free(e); return (int)s; }\n",
    )
    .unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("sbmre-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
