use pyo3::prelude::*;
use pyo3::types::PyModule;

fn with_module<F: for<'py> FnOnce(Python<'py>, &Bound<'py, PyModule>)>(f: F) {
    Python::attach(|py| {
        let m = PyModule::new(py, "reviewgan_py").unwrap();
        reviewgan_py::register(&m).unwrap();
        f(py, &m)
    });
}

#[test]
fn metrics_and_blend_from_python() {
    with_module(|_py, m| {
        let acc: f64 = m
            .getattr("accuracy")
            .unwrap()
            .call1((vec!["spam", "nonspam", "spam"], vec!["spam", "spam", "spam"]))
            .unwrap()
            .extract()
            .unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        let b: f64 = m.getattr("blend").unwrap().call1((0.2, 0.6)).unwrap().extract().unwrap();
        assert!((b - 0.3).abs() < 1e-12);
        let err = m
            .getattr("f1")
            .unwrap()
            .call1((vec!["spam"], vec!["spam", "spam"]))
            .unwrap_err();
        assert!(err.to_string().contains("length_mismatch"));
    });
}

#[test]
fn vocabulary_round_trip() {
    with_module(|_py, m| {
        let vocab = m
            .getattr("Vocabulary")
            .unwrap()
            .call_method1("build", (vec!["the room was clean", "the staff was rude"], 12))
            .unwrap();
        let ids: Vec<u32> = vocab.call_method1("encode", ("the room was rude", 8)).unwrap().extract().unwrap();
        assert_eq!((ids[0], ids.len()), (0, 8));
        let text: String = vocab.call_method1("decode", (ids,)).unwrap().extract().unwrap();
        assert_eq!(text, "the room was rude");
    });
}
