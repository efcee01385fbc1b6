use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use super::{Scalar, Tensor};

/// A shared, mutable leaf tensor: trainable weights and non-trainable
/// buffers (BN running statistics). Cloning a `Param` aliases the same
/// storage; use [`Param::deep_clone`] for an independent copy.
pub struct Param<T: Scalar>(Rc<ParamCell<T>>);

struct ParamCell<T: Scalar> {
    value: RefCell<Tensor<T>>,
    grad: RefCell<Option<Tensor<T>>>,
    trainable: bool,
    // number of times the value was bound into a graph
    reads: Cell<u64>,
}

impl<T: Scalar> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Param<T> {
    /// A trainable parameter (`requires_grad = true`).
    pub fn new(value: Tensor<T>) -> Self {
        Self::with_trainable(value, true)
    }

    /// A non-trainable buffer.
    pub fn buffer(value: Tensor<T>) -> Self {
        Self::with_trainable(value, false)
    }

    fn with_trainable(value: Tensor<T>, trainable: bool) -> Self {
        Param(Rc::new(ParamCell {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            trainable,
            reads: Cell::new(0),
        }))
    }

    pub fn requires_grad(&self) -> bool {
        self.0.trainable
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        self.0.value.borrow()
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor<T>> {
        self.0.value.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().numel()
    }

    pub fn grad(&self) -> Option<Ref<'_, Tensor<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    /// The gradient, or zeros when nothing has been accumulated.
    pub fn grad_or_zeros(&self) -> Tensor<T> {
        match &*self.0.grad.borrow() {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape()),
        }
    }

    /// `grad += g`, allocating the buffer on first use.
    pub fn accumulate_grad(&self, g: &Tensor<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match &mut *slot {
            Some(existing) => existing.add_assign(g),
            None => *slot = Some(g.clone()),
        }
    }

    pub fn zero_grad(&self) {
        let mut slot = self.0.grad.borrow_mut();
        match &mut *slot {
            Some(g) => g.fill(T::zero()),
            None => {
                if self.0.trainable {
                    *slot = Some(Tensor::zeros(self.shape()));
                }
            }
        }
    }

    pub fn set_value(&self, value: Tensor<T>) {
        *self.0.value.borrow_mut() = value;
    }

    /// Independent copy of the value (gradient and read counter reset).
    pub fn deep_clone(&self) -> Self {
        Self::with_trainable(self.value().clone(), self.0.trainable)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Stable identity of the underlying storage, for registry deduplication.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as *const () as usize
    }

    pub(crate) fn note_read(&self) {
        self.0.reads.set(self.0.reads.get() + 1);
    }

    /// How often this parameter has been bound into a graph since the last
    /// [`Param::reset_reads`].
    pub fn reads(&self) -> u64 {
        self.0.reads.get()
    }

    pub fn reset_reads(&self) {
        self.0.reads.set(0);
    }
}

impl<T: Scalar> fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param")
            .field("shape", &self.shape())
            .field("trainable", &self.0.trainable)
            .finish()
    }
}

/// Fills every listed gradient with zeros.
pub fn zero_grad<T: Scalar>(params: &[Param<T>]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_clears_and_is_idempotent() {
        let p = Param::new(Tensor::<f32>::from_vec(vec![0.0, 0.0]));
        p.accumulate_grad(&Tensor::from_vec(vec![1.0, 2.0]));
        zero_grad(std::slice::from_ref(&p));
        assert_eq!(p.grad().unwrap().data(), &[0.0, 0.0]);
        zero_grad(std::slice::from_ref(&p));
        assert_eq!(p.grad().unwrap().data(), &[0.0, 0.0]);
        zero_grad::<f32>(&[]);
    }

    #[test]
    fn clones_alias_storage() {
        let p = Param::new(Tensor::<f32>::from_vec(vec![1.0]));
        let q = p.clone();
        q.value_mut().data_mut()[0] = 5.0;
        assert_eq!(p.value().data()[0], 5.0);
        let r = p.deep_clone();
        r.value_mut().data_mut()[0] = 7.0;
        assert_eq!(p.value().data()[0], 5.0);
        assert!(p.ptr_eq(&q) && !p.ptr_eq(&r));
    }
}
