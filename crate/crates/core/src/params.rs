//! Parameter containers are generic over their payload: `Tensor<T>` when a
//! model is stored or optimized, `Var` once its tensors are bound to a tape.
//! The macro generates the field map and the flat name/value walks used by
//! the optimizer and the checkpoint writer.

macro_rules! param_fields {
    ($name:ident, $($field:ident),+ $(,)?) => {
        impl<P> $name<P> {
            /// Apply `f` to every field, producing the same structure with a
            /// new payload (e.g. binding tensors to tape nodes).
            pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field)),+ }
            }

            pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &self.$field));)+
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &mut self.$field));)+
            }
        }
    };
}

pub(crate) use param_fields;
