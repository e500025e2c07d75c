use std::ffi::{c_char, CStr, CString};
use std::ptr;

use gainsearch_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        gs_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(gs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn two_particle_ksg() {
    // members 0 and 2, identity forward map, increment 1 over unit step
    let p = [0.0, 2.0];
    let mut out = [0.0; 2];
    let s = unsafe { gs_ksg_update(1, 2, 1, p.as_ptr(), p.as_ptr(), [1.0].as_ptr(), 1.0, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, GsStatus::Ok);
    assert_eq!(out, [1.0, 1.0]);
}

#[test]
fn lsg_matches_hand_computation() {
    // deviations +-1/sqrt(1) scaled: P M^T = 2, M M^T = 2, sigma 1 -> G = 2/3
    let p = [-1.0, 1.0];
    let mut out = [0.0; 2];
    let s = unsafe { gs_lsg_update(1, 2, 1, p.as_ptr(), p.as_ptr(), [0.0].as_ptr(), 1.0, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, GsStatus::Ok);
    let g = 2.0 / 3.0;
    assert!((out[0] - (-1.0 + g)).abs() < 1e-12, "{out:?}");
    assert!((out[1] - (1.0 - g)).abs() < 1e-12, "{out:?}");
}

#[test]
fn update_may_write_in_place() {
    let mut p = [0.0, 2.0];
    let f = p;
    let s = unsafe { gs_ksg_update(1, 2, 1, p.as_ptr(), f.as_ptr(), [1.0].as_ptr(), 1.0, 0.0, p.as_mut_ptr()) };
    assert_eq!(s, GsStatus::Ok);
    assert_eq!(p, [1.0, 1.0]);
}

#[test]
fn errors_carry_codes_and_messages() {
    let p = [0.0, 2.0];
    let mut out = [0.0; 2];
    let s = unsafe { gs_ksg_update(1, 1, 1, p.as_ptr(), p.as_ptr(), [1.0].as_ptr(), 1.0, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, GsStatus::Dimension);
    assert!(last_error().contains("two members"));

    let s = unsafe { gs_ksg_update(1, 2, 1, ptr::null(), p.as_ptr(), [1.0].as_ptr(), 1.0, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, GsStatus::NullPointer);
    assert!(last_error().contains("predicted"));

    let s = unsafe { gs_lsg_update(1, 2, 1, p.as_ptr(), p.as_ptr(), [0.0].as_ptr(), 0.0, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, GsStatus::InvalidArgument);

    let bad = CString::new("[solver]\nn_e = \"many\"\n").unwrap();
    let mut cfg = ptr::null_mut();
    let s = unsafe { gs_config_from_toml(bad.as_ptr(), &mut cfg) };
    assert_ne!(s, GsStatus::Ok);
    assert!(cfg.is_null());
    assert!(!last_error().is_empty());

    // success clears the message
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { gs_config_default(&mut cfg) }, GsStatus::Ok);
    assert!(last_error().is_empty());
    unsafe { gs_config_free(cfg) };
}

#[test]
fn truncated_error_message() {
    let _ = unsafe { gs_data_len(ptr::null()) };
    let s = unsafe { gs_data_values(ptr::null(), ptr::null_mut(), 0) };
    assert_eq!(s, GsStatus::NullPointer);
    let mut buf = [1 as c_char; 4];
    let full = unsafe { gs_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(full > 3);
    assert_eq!(buf[3], 0);
    assert_eq!(unsafe { gs_last_error_message(ptr::null_mut(), 0) }, full);
}

#[test]
fn free_accepts_null() {
    unsafe {
        gs_config_free(ptr::null_mut());
        gs_model_free(ptr::null_mut());
        gs_data_free(ptr::null_mut());
        gs_reconstruction_free(ptr::null_mut());
    }
}

#[test]
fn end_to_end_gauss_newton() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(gs_config_default(&mut cfg), GsStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(gs_model_new(cfg, &mut model), GsStatus::Ok, "{}", last_error());
        let np = gs_model_n_params(model);
        let nm = gs_model_n_measurements(model);
        assert!(np > 0 && nm > 0);

        let mut data = ptr::null_mut();
        assert_eq!(gs_data_synthesize(cfg, 0.01, 3, &mut data), GsStatus::Ok, "{}", last_error());
        assert_eq!(gs_data_len(data), nm);
        let mut values = vec![0.0; nm];
        assert_eq!(gs_data_values(data, values.as_mut_ptr(), nm), GsStatus::Ok);
        assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));

        // zero perturbation gives zero signal
        let mut m = vec![1.0; nm];
        assert_eq!(gs_model_evaluate(model, vec![0.0; np].as_ptr(), np, m.as_mut_ptr(), nm), GsStatus::Ok);
        assert!(m.iter().all(|v| *v == 0.0));
        assert_eq!(gs_model_evaluate(model, ptr::null(), np + 1, m.as_mut_ptr(), nm), GsStatus::Dimension);

        let mut rec = ptr::null_mut();
        assert_eq!(gs_reconstruct(model, data, GsMethod::Gn, 0, &mut rec), GsStatus::Ok, "{}", last_error());
        let n = gs_reconstruction_len(rec);
        assert!(n > 0);
        assert!(gs_reconstruction_iterations(rec) > 0);
        let mut field = vec![0.0; n];
        let mut nodes = vec![0usize; n];
        assert_eq!(gs_reconstruction_field(rec, field.as_mut_ptr(), nodes.as_mut_ptr(), n), GsStatus::Ok);
        assert!(field.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(nodes.windows(2).all(|w| w[0] < w[1]));

        gs_reconstruction_free(rec);
        gs_data_free(data);
        gs_model_free(model);
        gs_config_free(cfg);
    }
}

#[test]
fn missing_data_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing.csv");
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut data = ptr::null_mut();
    let s = unsafe { gs_data_read_csv(c.as_ptr(), &mut data) };
    assert_ne!(s, GsStatus::Ok);
    assert!(data.is_null());
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/gainsearch.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["gs_ksg_update", "gs_lsg_update", "gs_model_new", "gs_reconstruct", "gs_last_error_message"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ GsConfig *c = 0; return gs_config_default(&c) == GS_STATUS_OK ? 0 : 1; }}\n")).unwrap();
    match std::process::Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() {
        Ok(st) => assert!(st.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler found; syntax check skipped"),
    }
}
