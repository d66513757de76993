//! Time-varying boundary potentials `c(t, x, y)`: parsing, printing, and
//! exact symbolic derivatives.

mod parse;

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
        }
    }
}

/// Expression tree over `t`, `x`, `y`.
///
/// Trees produced by the parser and by [`Expr::derivative`] never hold a
/// negative constant; negation is always an explicit `Neg` node.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Func(Func, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vars {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl Vars {
    pub fn new(t: f64, x: f64, y: f64) -> Self {
        Vars { t, x, y }
    }
}

// smart constructors with light constant folding

fn konst(v: f64) -> Expr {
    if v < 0.0 {
        Expr::Neg(Box::new(Expr::Const(-v)))
    } else {
        Expr::Const(v)
    }
}

fn as_const(e: &Expr) -> Option<f64> {
    match e {
        Expr::Const(v) => Some(*v),
        Expr::Neg(a) => as_const(a).map(|v| -v),
        _ => None,
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Neg(inner) => *inner,
        other => match as_const(&other) {
            Some(v) => konst(-v),
            None => Expr::Neg(Box::new(other)),
        },
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => konst(x + y),
        (Some(z), None) if z == 0.0 => b,
        (None, Some(z)) if z == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => konst(x - y),
        (Some(z), None) if z == 0.0 => neg(b),
        (None, Some(z)) if z == 0.0 => a,
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) => konst(x * y),
        (Some(z), _) | (_, Some(z)) if z == 0.0 => Expr::Const(0.0),
        (Some(o), None) if o == 1.0 => b,
        (None, Some(o)) if o == 1.0 => a,
        (Some(m), None) if m == -1.0 => neg(b),
        (None, Some(m)) if m == -1.0 => neg(a),
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (as_const(&a), as_const(&b)) {
        (Some(z), _) if z == 0.0 => Expr::Const(0.0),
        (None, Some(o)) if o == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, n: i32) -> Expr {
    match n {
        0 => Expr::Const(1.0),
        1 => a,
        _ => Expr::Pow(Box::new(a), n),
    }
}

impl Expr {
    /// Parse text over `t`, `x`, `y` with `+ - * / ^int`, unary minus,
    /// `sin`, `cos`, `exp` and the constant `pi`.
    pub fn parse(text: &str) -> Result<Expr> {
        parse::parse(text)
    }

    /// Evaluate with IEEE semantics (division by zero yields ±inf or NaN).
    pub fn eval(&self, v: Vars) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::T) => v.t,
            Expr::Var(Var::X) => v.x,
            Expr::Var(Var::Y) => v.y,
            Expr::Neg(a) => -a.eval(v),
            Expr::Add(a, b) => a.eval(v) + b.eval(v),
            Expr::Sub(a, b) => a.eval(v) - b.eval(v),
            Expr::Mul(a, b) => a.eval(v) * b.eval(v),
            Expr::Div(a, b) => a.eval(v) / b.eval(v),
            Expr::Pow(a, n) => a.eval(v).powi(*n),
            Expr::Func(f, a) => {
                let x = a.eval(v);
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                }
            }
        }
    }

    /// Evaluate, reporting a division by zero (including a zero base under a
    /// negative exponent) as a numeric error.
    pub fn try_eval(&self, v: Vars) -> Result<f64> {
        let out = match self {
            Expr::Const(_) | Expr::Var(_) => self.eval(v),
            Expr::Neg(a) => -a.try_eval(v)?,
            Expr::Add(a, b) => a.try_eval(v)? + b.try_eval(v)?,
            Expr::Sub(a, b) => a.try_eval(v)? - b.try_eval(v)?,
            Expr::Mul(a, b) => a.try_eval(v)? * b.try_eval(v)?,
            Expr::Div(a, b) => {
                let den = b.try_eval(v)?;
                if den == 0.0 {
                    return Err(Error::Numeric(format!("division by zero in `{self}` at (t={}, x={}, y={})", v.t, v.x, v.y)));
                }
                a.try_eval(v)? / den
            }
            Expr::Pow(a, n) => {
                let base = a.try_eval(v)?;
                if base == 0.0 && *n < 0 {
                    return Err(Error::Numeric(format!("zero raised to negative power in `{self}`")));
                }
                base.powi(*n)
            }
            Expr::Func(f, a) => Expr::Func(*f, Box::new(Expr::Const(a.try_eval(v)?))).eval(v),
        };
        Ok(out)
    }

    /// Exact symbolic partial derivative.
    pub fn derivative(&self, var: Var) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(w) => Expr::Const(if *w == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.derivative(var)),
            Expr::Add(a, b) => add(a.derivative(var), b.derivative(var)),
            Expr::Sub(a, b) => sub(a.derivative(var), b.derivative(var)),
            Expr::Mul(a, b) => add(
                mul(a.derivative(var), (**b).clone()),
                mul((**a).clone(), b.derivative(var)),
            ),
            Expr::Div(a, b) => div(
                sub(mul(a.derivative(var), (**b).clone()), mul((**a).clone(), b.derivative(var))),
                pow((**b).clone(), 2),
            ),
            Expr::Pow(a, n) => match *n {
                0 => Expr::Const(0.0),
                _ => mul(mul(konst(*n as f64), pow((**a).clone(), n - 1)), a.derivative(var)),
            },
            Expr::Func(f, a) => {
                let inner = a.derivative(var);
                match f {
                    Func::Sin => mul(Expr::Func(Func::Cos, a.clone()), inner),
                    Func::Cos => neg(mul(Expr::Func(Func::Sin, a.clone()), inner)),
                    Func::Exp => mul(self.clone(), inner),
                }
            }
        }
    }

    pub fn uses(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(w) => *w == var,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Func(_, a) => a.uses(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => a.uses(var) || b.uses(var),
        }
    }

    /// True if the tree is the literal zero.
    pub fn is_zero(&self) -> bool {
        as_const(self) == Some(0.0)
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(c) if *c < 0.0 => 0,
            _ => 5,
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if e.precedence() < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) if *c < 0.0 => write!(f, "0-{}", -c),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(Var::T) => f.write_str("t"),
            Expr::Var(Var::X) => f.write_str("x"),
            Expr::Var(Var::Y) => f.write_str("y"),
            Expr::Neg(a) => {
                f.write_str("-")?;
                // `-(2)` keeps a negated literal distinct from a literal
                let min = if matches!(**a, Expr::Const(_)) { 6 } else { 3 };
                write_child(f, a, min)
            }
            Expr::Add(a, b) => {
                write_child(f, a, 1)?;
                f.write_str(" + ")?;
                write_child(f, b, 2)
            }
            Expr::Sub(a, b) => {
                write_child(f, a, 1)?;
                f.write_str(" - ")?;
                write_child(f, b, 2)
            }
            Expr::Mul(a, b) => {
                write_child(f, a, 2)?;
                f.write_str("*")?;
                write_child(f, b, 3)
            }
            Expr::Div(a, b) => {
                write_child(f, a, 2)?;
                f.write_str("/")?;
                write_child(f, b, 3)
            }
            Expr::Pow(a, n) => {
                write_child(f, a, 5)?;
                write!(f, "^{n}")
            }
            Expr::Func(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// A potential `c(t, x, y)` with its gradient and Laplacian, both obtained
/// by exact differentiation. Valid for `t` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSpec {
    pub expr: Expr,
    pub grad: [Expr; 2],
    /// `[∂xx c, ∂xy c, ∂yy c]`.
    pub hess: [Expr; 3],
    pub lap: Expr,
}

impl PotentialSpec {
    pub fn new(expr: Expr) -> Self {
        let gx = expr.derivative(Var::X);
        let gy = expr.derivative(Var::Y);
        let hess = [gx.derivative(Var::X), gx.derivative(Var::Y), gy.derivative(Var::Y)];
        let lap = add(hess[0].clone(), hess[2].clone());
        PotentialSpec { expr, grad: [gx, gy], hess, lap }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self::new(Expr::parse(text)?))
    }

    pub fn value(&self, t: f64, p: [f64; 2]) -> f64 {
        self.expr.eval(Vars::new(t, p[0], p[1]))
    }

    pub fn gradient(&self, t: f64, p: [f64; 2]) -> [f64; 2] {
        let v = Vars::new(t, p[0], p[1]);
        [self.grad[0].eval(v), self.grad[1].eval(v)]
    }

    /// Symmetric Hessian `[[∂xx, ∂xy], [∂xy, ∂yy]]`.
    pub fn hessian(&self, t: f64, p: [f64; 2]) -> [[f64; 2]; 2] {
        let v = Vars::new(t, p[0], p[1]);
        let (a, b, c) = (self.hess[0].eval(v), self.hess[1].eval(v), self.hess[2].eval(v));
        [[a, b], [b, c]]
    }

    /// `m_t(p) = ∂²c/∂x² + ∂²c/∂y²`.
    pub fn laplacian(&self, t: f64, p: [f64; 2]) -> Result<f64> {
        if !p[0].is_finite() || !p[1].is_finite() || !t.is_finite() {
            return Err(Error::input("laplacian evaluated at a non-finite point"));
        }
        let m = self.lap.try_eval(Vars::new(t, p[0], p[1]))?;
        if !m.is_finite() {
            return Err(Error::Numeric(format!("laplacian is not finite at ({}, {})", p[0], p[1])));
        }
        Ok(m)
    }

    /// True if the Laplacian is the literal zero (the potential is
    /// harmonic by construction, e.g. `x*y`).
    pub fn is_harmonic_symbolically(&self) -> bool {
        self.lap.is_zero()
    }
}

impl fmt::Display for PotentialSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.expr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(s: &str, t: f64, x: f64, y: f64) -> f64 {
        Expr::parse(s).unwrap().eval(Vars::new(t, x, y))
    }

    #[test]
    fn parse_examples() {
        assert_eq!(ev("x*y + t", 1.0, 2.0, 3.0), 7.0);
        assert_eq!(ev("2+3*4", 0.0, 0.0, 0.0), 14.0);
        match Expr::parse("x +") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("-2^2", 0.0, 0.0, 0.0), -4.0);
        assert_eq!(ev("8/4/2", 0.0, 0.0, 0.0), 1.0);
        assert_eq!(ev("8-4-2", 0.0, 0.0, 0.0), 2.0);
        assert_eq!(ev("2*-x", 0.0, 3.0, 0.0), -6.0);
        assert_eq!(ev("x^2^3", 0.0, 2.0, 0.0), 64.0);
        assert_eq!(ev("x^-1", 0.0, 4.0, 0.0), 0.25);
        assert_eq!(ev("1.5e1 + pi*0", 0.0, 0.0, 0.0), 15.0);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(Expr::parse("z + 1"), Err(Error::UnknownIdentifier { offset: 0, .. })));
        assert!(matches!(Expr::parse("x^0.5"), Err(Error::Syntax { .. })));
        assert!(matches!(Expr::parse("x^y"), Err(Error::Syntax { .. })));
        assert!(matches!(Expr::parse("(x"), Err(Error::Syntax { offset: 2, .. })));
        assert!(matches!(Expr::parse(""), Err(Error::Input(_))));
        assert!(matches!(Expr::parse("x y"), Err(Error::Syntax { offset: 2, .. })));
        assert!(matches!(Expr::parse("sin x"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn derivative_examples() {
        let d = Expr::parse("x^2").unwrap().derivative(Var::X);
        assert_eq!(d.eval(Vars::new(0.0, 3.0, 0.0)), 6.0);
        let d = Expr::parse("x*y").unwrap().derivative(Var::X);
        assert_eq!(d, Expr::Var(Var::Y));
        let d = Expr::parse("sin(x)").unwrap().derivative(Var::Y);
        assert!(d.is_zero());
    }

    #[test]
    fn laplacian_examples() {
        let p = [0.3, -1.7];
        assert_eq!(PotentialSpec::parse("x^2+y^2").unwrap().laplacian(0.5, p).unwrap(), 4.0);
        assert_eq!(PotentialSpec::parse("x*y").unwrap().laplacian(0.5, p).unwrap(), 0.0);
        assert_eq!(PotentialSpec::parse("(x^2-y^2)/2").unwrap().laplacian(0.5, p).unwrap(), 0.0);
        let s = PotentialSpec::parse("1/x").unwrap();
        assert!(matches!(s.laplacian(0.0, [0.0, 1.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn harmonic_suite_vanishes_everywhere() {
        let mut r = crate::rng::stream(3, crate::rng::Purpose::Misc, 0);
        use rand::Rng as _;
        for text in ["x", "y", "x*y", "(x^2-y^2)/2"] {
            let s = PotentialSpec::parse(text).unwrap();
            for _ in 0..1000 {
                let p = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
                assert_eq!(s.laplacian(r.random(), p).unwrap(), 0.0, "{text}");
            }
        }
    }

    #[test]
    fn generic_potential_laplacian_matches_hand_derivation() {
        // c = x^2 sin(y) t  =>  m = t sin(y) (2 - x^2)
        let s = PotentialSpec::parse("x^2*sin(y)*t").unwrap();
        for &(t, x, y) in &[(0.3, 0.5, 1.1), (1.0, -2.0, 0.4), (0.0, 1.0, 1.0)] {
            let m = s.laplacian(t, [x, y]).unwrap();
            assert!((m - t * y.sin() * (2.0 - x * x)).abs() < 1e-14);
        }
    }

    #[test]
    fn printed_normal_form() {
        assert_eq!(Expr::parse("(x^2 - y^2)/2").unwrap().to_string(), "(x^2 - y^2)/2");
        assert_eq!(Expr::parse("-(2)").unwrap().to_string(), "-(2)");
        assert_eq!(Expr::parse("a").map(|_| ()).unwrap_err().to_string(), "unknown identifier `a` at offset 0");
    }

    // random expression trees for property tests

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..50).prop_map(|k| Expr::Const(k as f64 / 4.0)),
            Just(Expr::Var(Var::T)),
            Just(Expr::Var(Var::X)),
            Just(Expr::Var(Var::Y)),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(Expr::Add(Box::new(Expr::Const(3.0)), Box::new(Expr::Pow(Box::new(b), 2)))))),
                (inner.clone(), 0i32..4).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
                inner.clone().prop_map(|a| Expr::Func(Func::Sin, Box::new(a))),
                inner.clone().prop_map(|a| Expr::Func(Func::Cos, Box::new(a))),
                inner.prop_map(|a| Expr::Func(Func::Exp, Box::new(Expr::Func(Func::Sin, Box::new(a))))),
            ]
        })
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 256, .. ProptestConfig::default() })]

        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let back = Expr::parse(&printed).unwrap();
            prop_assert_eq!(&back, &e, "printed as {}", printed);
            prop_assert_eq!(back.to_string(), printed);
        }

        #[test]
        fn derivative_matches_central_differences(
            e in arb_expr(),
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.0f64..1.0), 100),
        ) {
            let dx = e.derivative(Var::X);
            let dy = e.derivative(Var::Y);
            let h = 1e-5;
            for (x, y, t) in pts {
                let f = |x: f64, y: f64| e.eval(Vars::new(t, x, y));
                let fdx = (f(x + h, y) - f(x - h, y)) / (2.0 * h);
                let fdy = (f(x, y + h) - f(x, y - h)) / (2.0 * h);
                let scale = f(x, y).abs() * 1e-5;
                let ex = dx.eval(Vars::new(t, x, y));
                let ey = dy.eval(Vars::new(t, x, y));
                prop_assert!(close(fdx, ex, 1e-6) || (fdx - ex).abs() < scale, "d/dx {} at ({},{},{}): fd {} vs {}", e, x, y, t, fdx, ex);
                prop_assert!(close(fdy, ey, 1e-6) || (fdy - ey).abs() < scale, "d/dy {} at ({},{},{}): fd {} vs {}", e, x, y, t, fdy, ey);
            }
        }

        #[test]
        fn derivative_is_linear(a in arb_expr(), b in arb_expr(), k in -3.0f64..3.0, x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let combo = Expr::Add(Box::new(Expr::Mul(Box::new(konst(k)), Box::new(a.clone()))), Box::new(b.clone()));
            let v = Vars::new(0.5, x, y);
            let lhs = combo.derivative(Var::X).eval(v);
            let rhs = k * a.derivative(Var::X).eval(v) + b.derivative(Var::X).eval(v);
            prop_assert!(close(lhs, rhs, 1e-9), "{} vs {}", lhs, rhs);
        }

        #[test]
        fn laplacian_matches_second_differences(e in arb_expr(), x in -1.0f64..1.0, y in -1.0f64..1.0, t in 0.0f64..1.0) {
            let spec = PotentialSpec::new(e.clone());
            let h = 1e-4;
            let f = |x: f64, y: f64| e.eval(Vars::new(t, x, y));
            let fd = (f(x + h, y) + f(x - h, y) + f(x, y + h) + f(x, y - h) - 4.0 * f(x, y)) / (h * h);
            let exact = spec.laplacian(t, [x, y]).unwrap();
            let slack = 1e-15 * f(x, y).abs() / (h * h);
            prop_assert!(close(fd, exact, 1e-6) || (fd - exact).abs() < 50.0 * slack + 1e-6, "{}: fd {} vs {}", e, fd, exact);
        }
    }
}
