use std::ffi::CStr;
use std::ptr;

use overq_ffi::*;

fn config(bits: u32, s: f64) -> OverqQuantConfig {
    let mut cfg = OverqQuantConfig {
        magnitude_bits: 0,
        clip_scale: 0.0,
        overwrite_threshold: 0.0,
    };
    assert_eq!(
        unsafe { overq_quant_config_new(bits, s, &mut cfg) },
        OverqStatus::Ok
    );
    cfg
}

fn encode(x: &[f64], cfg: &OverqQuantConfig, v: OverqVariant) -> *mut OverqEncoded {
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { overq_encode(x.as_ptr(), x.len(), cfg, v, &mut h) },
        OverqStatus::Ok
    );
    h
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; overq_last_error_length().max(1)];
    unsafe {
        overq_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn config_and_quantize() {
    let cfg = config(4, 1.0);
    assert_eq!(cfg.overwrite_threshold, 0.25);
    let mut codes = [0i64; 2];
    let x = [0.5, -2.0];
    assert_eq!(
        unsafe { overq_quantize(x.as_ptr(), 2, &cfg, codes.as_mut_ptr()) },
        OverqStatus::Ok
    );
    assert_eq!(codes, [8, -15]);

    let mut bad = cfg;
    assert_eq!(
        unsafe { overq_quant_config_new(1, 1.0, &mut bad) },
        OverqStatus::InvalidArgument
    );
    assert!(last_error().contains("magnitude_bits"));
    assert_eq!(
        unsafe { overq_quant_config_new(4, 1.0, ptr::null_mut()) },
        OverqStatus::NullPointer
    );

    let samples = [-1.0, 1.0];
    let mut c = cfg;
    assert_eq!(
        unsafe { overq_calibrate(samples.as_ptr(), 2, 4, OverqCalibration::Max, 0.0, &mut c) },
        OverqStatus::Ok
    );
    assert_eq!(c.clip_scale, 1.0);
}

#[test]
fn encode_decode_and_dot() {
    let cfg = config(4, 1.0);
    let h = encode(&[3.0, 0.0], &cfg, OverqVariant::Shift);
    assert_eq!(unsafe { overq_encoded_len(h) }, 2);
    let (mut flags, mut neg, mut mag) = ([0u8; 2], [0u8; 2], [0u32; 2]);
    assert_eq!(
        unsafe {
            overq_encoded_slots(h, flags.as_mut_ptr(), neg.as_mut_ptr(), mag.as_mut_ptr(), 2)
        },
        OverqStatus::Ok
    );
    assert_eq!((flags, neg, mag), ([1, 1], [0, 0], [13, 2]));

    let mut out = [0.0; 2];
    assert_eq!(
        unsafe { overq_decode(h, out.as_mut_ptr(), 2) },
        OverqStatus::Ok
    );
    assert!((out[0] - 3.0).abs() < 1e-12);
    assert_eq!(
        unsafe { overq_decode(h, out.as_mut_ptr(), 1) },
        OverqStatus::LengthMismatch
    );

    let w = [5i64, -100];
    let mut acc = 0;
    assert_eq!(
        unsafe { overq_dot_reference(h, w.as_ptr(), 2, 7, &mut acc) },
        OverqStatus::Ok
    );
    assert_eq!(acc, 45 * 5 * 8);

    let mut need = 0;
    assert_eq!(
        unsafe { overq_encoded_packed(h, ptr::null_mut(), 0, &mut need) },
        OverqStatus::BufferTooSmall
    );
    let mut buf = vec![0u8; need];
    assert_eq!(
        unsafe { overq_encoded_packed(h, buf.as_mut_ptr(), buf.len(), &mut need) },
        OverqStatus::Ok
    );
    let mut back = ptr::null_mut();
    assert_eq!(
        unsafe {
            overq_encoded_from_packed(
                buf.as_ptr(),
                buf.len(),
                2,
                &cfg,
                OverqVariant::Shift,
                &mut back,
            )
        },
        OverqStatus::Ok
    );
    let mut again = [0.0; 2];
    unsafe { overq_decode(back, again.as_mut_ptr(), 2) };
    assert_eq!(out, again);
    // Same bits read as Baseline are malformed: flags are set.
    let mut bad = ptr::null_mut();
    assert_eq!(
        unsafe {
            overq_encoded_from_packed(
                buf.as_ptr(),
                buf.len(),
                2,
                &cfg,
                OverqVariant::Baseline,
                &mut bad,
            )
        },
        OverqStatus::MalformedEncoding
    );
    assert!(bad.is_null());
    unsafe {
        overq_encoded_free(back);
        overq_encoded_free(h);
        overq_encoded_free(ptr::null_mut());
    }
}

#[test]
fn array_matches_reference() {
    let cfg = config(4, 1.0);
    let weights = [10i64, -3, 7, 5];
    let mut arr = ptr::null_mut();
    assert_eq!(
        unsafe {
            overq_array_new(
                2,
                2,
                OverqPeVariant::Shift,
                4,
                weights.as_ptr(),
                7,
                &mut arr,
            )
        },
        OverqStatus::Ok
    );
    let hs = [
        encode(&[3.0, 0.0], &cfg, OverqVariant::ShiftZeroReuse),
        encode(&[0.3, 0.0], &cfg, OverqVariant::ShiftZeroReuse),
        encode(&[-0.4, 0.9], &cfg, OverqVariant::ShiftZeroReuse),
    ];
    let ptrs: Vec<*const OverqEncoded> = hs.iter().map(|&h| h as *const _).collect();
    let mut out = [0i64; 6];
    let mut cycles = 0u64;
    assert_eq!(
        unsafe { overq_array_run(arr, ptrs.as_ptr(), 3, out.as_mut_ptr(), &mut cycles) },
        OverqStatus::Ok
    );
    assert_eq!(cycles, 3 + 2 + 2 - 2);
    for (t, &h) in hs.iter().enumerate() {
        for j in 0..2 {
            let col = [weights[j], weights[2 + j]];
            let mut acc = 0;
            unsafe { overq_dot_reference(h, col.as_ptr(), 2, 7, &mut acc) };
            assert_eq!(out[t * 2 + j], acc);
        }
    }

    // A Split array cannot run Shift encodings.
    let mut split = ptr::null_mut();
    unsafe {
        overq_array_new(
            2,
            2,
            OverqPeVariant::Split,
            4,
            weights.as_ptr(),
            7,
            &mut split,
        )
    };
    assert_eq!(
        unsafe { overq_array_run(split, ptrs.as_ptr(), 1, out.as_mut_ptr(), ptr::null_mut()) },
        OverqStatus::InvalidArgument
    );
    unsafe {
        overq_array_free(split);
        overq_array_free(arr);
        for h in hs {
            overq_encoded_free(h);
        }
    }
}

#[test]
fn header_is_generated() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/overq.h")).unwrap();
    for sym in [
        "OVERQ_H",
        "typedef struct OverqEncoded OverqEncoded;",
        "typedef struct OverqArray OverqArray;",
        "OVERQ_STATUS_OK = 0",
        "overq_encode(",
        "overq_array_run(",
        "overq_last_error_message(",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
    let v = unsafe { CStr::from_ptr(overq_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Compile the C example against the generated header and static library.
#[test]
fn c_smoke_program() {
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let lib = [
        deps.join("liboverq_ffi.a"),
        deps.parent().unwrap().join("liboverq_ffi.a"),
    ]
    .into_iter()
    .find(|p| p.exists());
    let Some(lib) = lib else {
        eprintln!("skipping: no static library");
        return;
    };
    if std::process::Command::new("cc")
        .arg("--version")
        .output()
        .is_err()
    {
        eprintln!("skipping: no C compiler");
        return;
    }
    let bin = std::env::temp_dir().join(format!("overq_smoke_{}", std::process::id()));
    let status = std::process::Command::new("cc")
        .arg(manifest.join("examples/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    let _ = std::fs::remove_file(&bin);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "decoded=3.000 ref=1800 sim=1800 cycles=2"
    );
}
