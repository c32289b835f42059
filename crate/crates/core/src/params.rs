//! Named parameter collections and their binding onto a [`Graph`].

use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// A fixed, ordered set of named parameter tensors.
///
/// `names`, `tensors`, `tensors_mut` and the vars returned by `bind` all use
/// the same order.
pub trait ParamSet {
    type Vars: Copy;

    fn names() -> Vec<String>;
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    fn bind(&self, g: &mut Graph, trainable: bool) -> Self::Vars;
    fn vars(v: &Self::Vars) -> Vec<Var>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Declares a params struct of tensors plus its mirror struct of [`Var`]s.
macro_rules! param_set {
    (
        $(#[$meta:meta])*
        pub struct $name:ident / $vars:ident {
            $( $(#[$fmeta:meta])* $field:ident ),+ $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $crate::tensor::Tensor, )+
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $( pub $field: $crate::graph::Var, )+
        }

        impl $crate::params::ParamSet for $name {
            type Vars = $vars;

            fn names() -> alloc::vec::Vec<alloc::string::String> {
                alloc::vec![$(alloc::string::String::from(stringify!($field))),+]
            }

            fn tensors(&self) -> alloc::vec::Vec<&$crate::tensor::Tensor> {
                alloc::vec![$(&self.$field),+]
            }

            fn tensors_mut(&mut self) -> alloc::vec::Vec<&mut $crate::tensor::Tensor> {
                alloc::vec![$(&mut self.$field),+]
            }

            fn bind(&self, g: &mut $crate::graph::Graph, trainable: bool) -> $vars {
                $vars { $( $field: g.leaf(self.$field.clone(), trainable), )+ }
            }

            fn vars(v: &$vars) -> alloc::vec::Vec<$crate::graph::Var> {
                alloc::vec![$(v.$field),+]
            }
        }
    };
}
pub(crate) use param_set;
