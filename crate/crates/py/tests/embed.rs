use pyo3::ffi::c_str;
use pyo3::prelude::*;
use pykcd::pykcd;

#[test]
fn module_works_inside_an_embedded_interpreter() {
    pyo3::append_to_inittab!(pykcd);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            c_str!(
                r#"
import pykcd
m = pykcd.consistency_matrix([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]], [[0.0, 1.0], [1.0, 0.0], [1.0, 2.0]])
t = pykcd.match_bipartite(m)
assert t.index_map() == [1, 0], t.index_map()
assert m.score(t) > m.score()
try:
    pykcd.consistency_matrix([[1.0]], [[1.0, 2.0]])
    raise AssertionError("shape mismatch accepted")
except pykcd.KcdError as e:
    assert str(e).startswith("ShapeMismatch"), e
"#
            ),
            None,
            None,
        )
        .map_err(|e| e.display(py))
        .unwrap();
    });
}
