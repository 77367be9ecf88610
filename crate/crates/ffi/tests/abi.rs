use std::ffi::{c_char, CString};
use std::ptr;

use csifb_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let len = unsafe { csifb_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take(len.min(255)).map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn desk_model() -> *mut CsifbModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { csifb_model_new_desk(3, &mut m) }, CsifbStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn encode_decode_round_trip_through_a_checkpoint() {
    let model = desk_model();
    let (mut na, mut nt, mut n, mut m) = (0, 0, 0, 0);
    assert_eq!(unsafe { csifb_model_dims(model, &mut na, &mut nt, &mut n, &mut m) }, CsifbStatus::Ok);
    assert_eq!((na, nt, n, m), (8, 8, 128, 32));

    let h: Vec<f64> = (0..2 * n).map(|i| ((i * 7 % 13) as f64 - 6.0) / 10.0).collect();
    let mut s = vec![0.0; 2 * m];
    assert_eq!(unsafe { csifb_model_encode(model, h.as_ptr(), h.len(), s.as_mut_ptr(), s.len()) }, CsifbStatus::Ok);
    let mut x = vec![0.0; 2 * n];
    let st = unsafe { csifb_model_decode(model, s.as_ptr(), s.len(), 4, 0, x.as_mut_ptr(), x.len()) };
    assert_eq!(st, CsifbStatus::Ok);
    assert!(x.iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { csifb_model_save(model, path.as_ptr()) }, CsifbStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { csifb_model_load(path.as_ptr(), &mut loaded) }, CsifbStatus::Ok);
    let mut x2 = vec![0.0; 2 * n];
    let st = unsafe { csifb_model_decode(loaded, s.as_ptr(), s.len(), 4, 0, x2.as_mut_ptr(), x2.len()) };
    assert_eq!(st, CsifbStatus::Ok);
    assert_eq!(x, x2);
    unsafe {
        csifb_model_free(model);
        csifb_model_free(loaded);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let model = desk_model();
    let h = vec![0.5; 100];
    let mut s = vec![0.0; 32];
    let st = unsafe { csifb_model_encode(model, h.as_ptr(), h.len(), s.as_mut_ptr(), s.len()) };
    assert_eq!(st, CsifbStatus::Dimension);
    assert!(last_error().contains("128"), "{}", last_error());

    let st = unsafe { csifb_model_encode(ptr::null(), h.as_ptr(), h.len(), s.as_mut_ptr(), s.len()) };
    assert_eq!(st, CsifbStatus::NullPointer);

    let mut out = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { csifb_model_load(missing.as_ptr(), &mut out) }, CsifbStatus::Io);
    assert!(out.is_null());

    let mut flops = 0;
    assert_eq!(unsafe { csifb_encoder_flops(32, 32, 7, &mut flops) }, CsifbStatus::InvalidArgument);
    assert_eq!(unsafe { csifb_encoder_flops(32, 32, 8, &mut flops) }, CsifbStatus::Ok);
    assert_eq!(flops, 524_288);
    assert_eq!(last_error(), "");
    unsafe {
        csifb_model_free(model);
        csifb_model_free(ptr::null_mut());
    }
}

#[test]
fn quantizer_handles() {
    let samples: Vec<f64> = (0..4000).map(|i| (i as f64 / 3999.0) * 2.0 - 1.0).collect();
    let mut q = ptr::null_mut();
    let st = unsafe { csifb_quantizer_fit(samples.as_ptr(), samples.len(), 1, 200, 1e-10, &mut q) };
    assert_eq!(st, CsifbStatus::Ok);
    assert_eq!(unsafe { csifb_quantizer_bits(q) }, 1);
    let vals = [-0.9, -0.1, 0.2, 0.7];
    let mut idx = [9u32; 4];
    let mut deq = [0.0; 4];
    let st = unsafe { csifb_quantizer_quantize(q, vals.as_ptr(), 4, idx.as_mut_ptr(), deq.as_mut_ptr()) };
    assert_eq!(st, CsifbStatus::Ok);
    assert_eq!(idx, [0, 0, 1, 1]);
    assert!((deq[0] + 0.5).abs() < 0.01 && (deq[3] - 0.5).abs() < 0.01);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("q.clcb").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { csifb_quantizer_save(q, path.as_ptr()) }, CsifbStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { csifb_quantizer_load(path.as_ptr(), &mut back) }, CsifbStatus::Ok);
    let mut deq2 = [0.0; 4];
    let st = unsafe { csifb_quantizer_quantize(back, vals.as_ptr(), 4, ptr::null_mut(), deq2.as_mut_ptr()) };
    assert_eq!(st, CsifbStatus::Ok);
    assert_eq!(deq, deq2);

    let mut bad = ptr::null_mut();
    let st = unsafe { csifb_quantizer_fit(samples.as_ptr(), samples.len(), 9, 10, 1e-6, &mut bad) };
    assert_eq!(st, CsifbStatus::InvalidArgument);
    assert_eq!(csifb_feedback_bits(512, 3), 1536);
    assert_eq!(csifb_feedback_bits(256, 6), 1536);
    unsafe {
        csifb_quantizer_free(q);
        csifb_quantizer_free(back);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/csifb.h")).unwrap();
    for sym in [
        "csifb_model_load",
        "csifb_model_decode",
        "csifb_quantizer_fit",
        "csifb_last_error",
        "CSIFB_STATUS_OK",
        "typedef struct CsifbModel CsifbModel",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"csifb.h\"\nint main(void) { CsifbModel *m = 0; return csifb_model_new_desk(1, &m) == CSIFB_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let Ok(status) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    assert!(status.success());
}
