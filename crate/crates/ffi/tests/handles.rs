use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use coldrec::numerics::checkpoint;
use coldrec::numerics::tensor::Tensor;
use coldrec::saviorenc::EmbeddingTable;
use coldrec_ffi::*;

fn cstr(s: &std::path::Path) -> CString {
    CString::new(s.to_str().unwrap()).unwrap()
}

#[test]
fn tensor_file_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.savior");
    let a = Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 6.0]).unwrap();
    let b = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    checkpoint::write(&path, &[("alpha".into(), a.clone()), ("beta".into(), b)]).unwrap();

    let mut f = ptr::null_mut();
    let p = cstr(&path);
    assert_eq!(unsafe { coldrec_tensors_open(p.as_ptr(), &mut f) }, ColdrecStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { coldrec_tensors_count(f, &mut n) }, ColdrecStatus::Ok);
    assert_eq!(n, 2);

    let mut name = ptr::null();
    assert_eq!(unsafe { coldrec_tensors_name(f, 0, &mut name) }, ColdrecStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(name) }.to_str().unwrap(), "alpha");

    let mut dims = [0usize; 4];
    let mut rank = 0;
    assert_eq!(
        unsafe { coldrec_tensors_shape(f, 0, dims.as_mut_ptr(), dims.len(), &mut rank) },
        ColdrecStatus::Ok
    );
    assert_eq!(&dims[..rank], &[2, 3]);

    let mut small = [0.0; 2];
    let mut len = 0;
    assert_eq!(
        unsafe { coldrec_tensors_data(f, 0, small.as_mut_ptr(), small.len(), &mut len) },
        ColdrecStatus::BufferTooSmall
    );
    assert_eq!(len, 6);
    let mut buf = vec![0.0; len];
    assert_eq!(
        unsafe { coldrec_tensors_data(f, 0, buf.as_mut_ptr(), buf.len(), &mut len) },
        ColdrecStatus::Ok
    );
    assert!(buf.iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    assert_eq!(
        unsafe { coldrec_tensors_name(f, 2, &mut name) },
        ColdrecStatus::OutOfRange
    );
    unsafe { coldrec_tensors_free(f) };
    unsafe { coldrec_tensors_free(ptr::null_mut()) };
}

#[test]
fn missing_tensor_file_is_io_error() {
    let mut f = ptr::null_mut();
    let p = CString::new("/nonexistent/x.savior").unwrap();
    assert_eq!(unsafe { coldrec_tensors_open(p.as_ptr(), &mut f) }, ColdrecStatus::Io);
    assert!(f.is_null());
    assert!(unsafe { coldrec_last_error(ptr::null_mut(), 0) } > 1);
}

#[test]
fn embedding_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let rows = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.6, 0.8, 0.0, -1.0]).unwrap();
    EmbeddingTable::new(rows).save(dir.path(), "embedding").unwrap();

    let mut e = ptr::null_mut();
    let d = cstr(dir.path());
    let stem = CString::new("embedding").unwrap();
    assert_eq!(
        unsafe { coldrec_embeddings_open(d.as_ptr(), stem.as_ptr(), &mut e) },
        ColdrecStatus::Ok
    );
    let (mut items, mut dim) = (0, 0);
    assert_eq!(
        unsafe { coldrec_embeddings_size(e, &mut items, &mut dim) },
        ColdrecStatus::Ok
    );
    assert_eq!((items, dim), (3, 2));
    let mut v = [0.0; 2];
    assert_eq!(
        unsafe { coldrec_embeddings_get(e, 1, v.as_mut_ptr(), 2) },
        ColdrecStatus::Ok
    );
    assert_eq!(v, [0.6, 0.8]);
    assert_eq!(
        unsafe { coldrec_embeddings_get(e, 3, v.as_mut_ptr(), 2) },
        ColdrecStatus::OutOfRange
    );
    unsafe { coldrec_embeddings_free(e) };
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/coldrec.h");
    let src = format!("#include \"{header}\"\nint main(void) {{ return COLDREC_STATUS_OK; }}\n");
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("probe.c");
    std::fs::write(&c, src).unwrap();
    match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&c)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}
