use crate::element::Element;
use crate::error::{invalid, Result};
use crate::ops::elementwise::broadcast_offsets;
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

impl<T: Element> Tape<T> {
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            "sum_all",
            value,
            &[x],
            Box::new(|args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).numel()).expect("count fits");
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(
            "mean_all",
            value,
            &[x],
            Box::new(move |args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item() / n))]),
        )
    }

    /// Sum over `axes`. Reduced axes are kept with size 1 when `keepdim`.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce_axes("sum_axes", x, axes, keepdim, false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce_axes("mean_axes", x, axes, keepdim, true)
    }

    fn reduce_axes(
        &mut self,
        op: &'static str,
        x: Var,
        axes: &[usize],
        keepdim: bool,
        mean: bool,
    ) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= in_shape.len()) {
            invalid!("{op}: axis {bad} out of range for rank {}", in_shape.len());
        }
        let kept: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let count = numel(&in_shape) / numel(&kept);
        let scale = if mean { T::one() / T::from_usize(count).expect("count fits") } else { T::one() };
        // Each input element maps onto one element of the keepdim-shaped output.
        let offsets = broadcast_offsets(&in_shape, &kept);
        let mut acc = vec![T::zero(); numel(&kept)];
        for (&v, &o) in self.value(x).data().iter().zip(&offsets) {
            acc[o] = acc[o] + v;
        }
        acc.iter_mut().for_each(|v| *v = *v * scale);
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            let s: Vec<usize> =
                in_shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let value = Tensor::from_vec(&out_shape, acc)?;
        self.push(
            op,
            value,
            &[x],
            Box::new(move |args| {
                let g = args.grad.data();
                let data = offsets.iter().map(|&o| g[o] * scale).collect();
                vec![Some(Tensor::from_vec(&in_shape, data).expect("input shape"))]
            }),
        )
    }
}
