//! Named parameter tensors.
//!
//! Every model is a plain struct of [`Mat`]s. A zeroed copy of the same struct
//! holds its gradients, so optimizers, serializers and gradient checks walk
//! parameters and gradients in lockstep through [`ParamSet`].

use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Role of a tensor, which decides whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix or embedding table; decayed.
    Weight,
    /// Bias vector; never decayed.
    Bias,
    /// Layer-norm gain or shift; never decayed.
    Norm,
    /// Free scalar such as a log temperature.
    Scalar,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

pub trait ParamSet<T: Scalar>: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Mat<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Mat<T>));

    /// Same shapes, all zeros.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, m| m.fill(T::zero()));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, m| n += m.as_slice().len());
        n
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, m| ok &= m.is_finite());
        ok
    }

    /// All values, in visiting order.
    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, m| out.extend_from_slice(m.as_slice()));
        out
    }

    /// Overwrites all values from `flat`, in visiting order.
    fn assign_flat(&mut self, flat: &[T]) {
        let mut at = 0;
        self.visit_mut(&mut |_, _, m| {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        assert_eq!(at, flat.len(), "flat parameter length");
    }

    fn scale(&mut self, s: T) {
        self.visit_mut(&mut |_, _, m| m.scale(s));
    }

    /// Names, kinds and shapes, in visiting order.
    fn layout(&self) -> Vec<(String, ParamKind, usize, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, kind, m| out.push((name.to_string(), kind, m.rows(), m.cols())));
        out
    }
}

/// Implements [`ParamSet`] for a struct by listing `(field, kind)` pairs.
/// Nested parameter structs are listed with `nested`.
#[macro_export]
macro_rules! impl_param_set {
    ($ty:ident { $($field:ident : $kind:ident),* $(,)? } $(nested { $($sub:ident),* $(,)? })?) => {
        impl<T: $crate::scalar::Scalar> $crate::params::ParamSet<T> for $ty<T> {
            fn visit(&self, f: &mut dyn FnMut(&str, $crate::params::ParamKind, &$crate::tensor::Mat<T>)) {
                $( f(stringify!($field), $crate::params::ParamKind::$kind, &self.$field); )*
                $($(
                    self.$sub.visit(&mut |name, kind, m| {
                        f(&format!("{}.{}", stringify!($sub), name), kind, m)
                    });
                )*)?
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, $crate::params::ParamKind, &mut $crate::tensor::Mat<T>)) {
                $( f(stringify!($field), $crate::params::ParamKind::$kind, &mut self.$field); )*
                $($(
                    self.$sub.visit_mut(&mut |name, kind, m| {
                        f(&format!("{}.{}", stringify!($sub), name), kind, m)
                    });
                )*)?
            }
        }
    };
}
