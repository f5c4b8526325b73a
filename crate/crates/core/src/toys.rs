//! The four synthetic benchmark SCMs and a linear-Gaussian reference model.
//!
//! All noises are standard normal.
//!
//! | toy | equations |
//! |-----|-----------|
//! | 1 | `n1 = u1`, `n2 = -n1 + u2/3`, `n3 = sin(0.25π(0.5 n2 + n1)) + 0.2 u3` |
//! | 2 | `n1 = u1`, `n2 = sin(0.2π(n1 + 2.5)) + 0.2 u2` |
//! | 3 | `n1 = u1`, `n2 = -n1 + u2/3`, `n3 = sin(0.1π(n2 + 2)) + 0.2 u3`, `n4 = sin(0.25π(n3 - n1 + 2)) + 0.2 u4` |
//! | 4 | `n1 = u1`, `n2 = -n1 + u2/3`, `n3 = sin(0.3π(n2 + 2)) + 0.2 u3` |
//!
//! Toy 2 is sometimes printed with `n2` inside its own sine. That reading is a
//! self-loop; the model is a two-node graph in which `n1` causes `n2`, so the
//! argument is `n1`.

use crate::scm::Scm;

type Equation = (&'static str, &'static [&'static str], &'static str);

const TOY1: &[Equation] = &[
    ("n1", &[], "u"),
    ("n2", &["n1"], "-n1 + (1/3)*u"),
    ("n3", &["n1", "n2"], "sin(0.25*pi*(0.5*n2 + n1)) + 0.2*u"),
];

const TOY2: &[Equation] = &[
    ("n1", &[], "u"),
    ("n2", &["n1"], "sin(0.2*pi*(n1 + 2.5)) + 0.2*u"),
];

const TOY3: &[Equation] = &[
    ("n1", &[], "u"),
    ("n2", &["n1"], "-n1 + (1/3)*u"),
    ("n3", &["n2"], "sin(0.1*pi*(n2 + 2)) + 0.2*u"),
    ("n4", &["n1", "n3"], "sin(0.25*pi*(n3 - n1 + 2)) + 0.2*u"),
];

const TOY4: &[Equation] = &[
    ("n1", &[], "u"),
    ("n2", &["n1"], "-n1 + (1/3)*u"),
    ("n3", &["n2"], "sin(0.3*pi*(n2 + 2)) + 0.2*u"),
];

const LINEAR: &[Equation] = &[
    ("x1", &[], "u"),
    ("x2", &["x1"], "1.5*x1 + 0.5*u"),
    ("x3", &["x1", "x2"], "0.6*x1 - 0.8*x2 + 0.3*u"),
];

/// Equations of toy `k`, or `None` outside `1..=4`.
pub fn toy_equations(k: usize) -> Option<&'static [Equation]> {
    match k {
        1 => Some(TOY1),
        2 => Some(TOY2),
        3 => Some(TOY3),
        4 => Some(TOY4),
        _ => None,
    }
}

/// Ground-truth SCM of toy `k`.
///
/// # Panics
/// If `k` is not in `1..=4`.
pub fn toy_scm(k: usize) -> Scm {
    let eqs = toy_equations(k).unwrap_or_else(|| panic!("no toy {k}; expected 1..=4"));
    Scm::from_equations(eqs).expect("toy equations are well-formed")
}

/// Three-node linear-Gaussian chain with a skip edge, `x1 → x2 → x3`, `x1 → x3`.
pub fn linear_gaussian() -> Scm {
    Scm::from_equations(LINEAR).expect("linear equations are well-formed")
}
