//! Flat parameter storage shared by the segmentation network and the
//! discriminator. Every learnable tensor is a slot in one `Vec<T>`, so the
//! optimizer, checkpoints and finite-difference checks all see a single
//! canonical ordering.

use crate::rng::SeededRng;
use crate::tensor::{self, Real, Tensor, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// One convolution (or transposed convolution) with its parameter slots.
/// The bias, when present, is stored immediately after the weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamSlot,
    pub bias: Option<ParamSlot>,
    pub cin: usize,
    pub cout: usize,
    pub win: Window,
    pub transposed: bool,
}

impl ConvLayer {
    pub fn fan_in(&self) -> usize {
        if self.transposed {
            // each output site sees roughly k²/stride² taps per input channel
            (self.cin * self.win.k * self.win.k / (self.win.stride * self.win.stride)).max(1)
        } else {
            self.cin * self.win.k * self.win.k
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>) -> Tensor<T> {
        self.forward_from(params, x, None)
    }

    /// Forward pass that also returns the unfolded input, for reuse by
    /// [`ConvLayer::backward_from`]. Transposed layers never unfold.
    pub fn forward_keep<T: Real>(
        &self,
        params: &[T],
        x: &Tensor<T>,
    ) -> (Tensor<T>, Option<Vec<T>>) {
        let cols = if self.transposed {
            None
        } else {
            tensor::unfold(x, self.win)
        };
        (self.forward_from(params, x, cols.as_deref()), cols)
    }

    fn forward_from<T: Real>(&self, params: &[T], x: &Tensor<T>, cols: Option<&[T]>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "layer input channels");
        let w = &params[self.weight.range()];
        let b = self.bias.map(|s| &params[s.range()]);
        if self.transposed {
            tensor::conv_transpose2d(x, w, b, self.cout, self.win)
        } else {
            tensor::conv2d(x, cols, w, b, self.cout, self.win)
        }
    }

    /// Accumulate parameter gradients into `grads`; return the input gradient
    /// when `want_dx`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        dout: &Tensor<T>,
        grads: &mut [T],
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        self.backward_from(params, x, None, dout, grads, want_dx)
    }

    /// [`ConvLayer::backward`] reusing the unfolded input from
    /// [`ConvLayer::forward_keep`].
    pub fn backward_from<T: Real>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        cols: Option<&[T]>,
        dout: &Tensor<T>,
        grads: &mut [T],
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let w = &params[self.weight.range()];
        let blen = self.bias.map_or(0, |s| s.len);
        let region = &mut grads[self.weight.offset..self.weight.offset + self.weight.len + blen];
        let (dw, db) = region.split_at_mut(self.weight.len);
        let db = self.bias.map(|_| db);
        if self.transposed {
            tensor::conv_transpose2d_backward(x, w, dout, self.win, dw, db, want_dx)
        } else {
            tensor::conv2d_backward(x, cols, w, dout, self.win, dw, db, want_dx)
        }
    }
}

/// Allocates consecutive slots.
#[derive(Default)]
pub(crate) struct LayoutBuilder {
    next: usize,
}

impl LayoutBuilder {
    fn slot(&mut self, len: usize) -> ParamSlot {
        let s = ParamSlot {
            offset: self.next,
            len,
        };
        self.next += len;
        s
    }

    pub fn conv(&mut self, cin: usize, cout: usize, win: Window, bias: bool) -> ConvLayer {
        let weight = self.slot(cout * cin * win.k * win.k);
        let bias = bias.then(|| self.slot(cout));
        ConvLayer {
            weight,
            bias,
            cin,
            cout,
            win,
            transposed: false,
        }
    }

    pub fn conv_transpose(
        &mut self,
        cin: usize,
        cout: usize,
        win: Window,
        bias: bool,
    ) -> ConvLayer {
        let weight = self.slot(cin * cout * win.k * win.k);
        let bias = bias.then(|| self.slot(cout));
        ConvLayer {
            weight,
            bias,
            cin,
            cout,
            win,
            transposed: true,
        }
    }

    pub fn dense(&mut self, cin: usize, cout: usize) -> ConvLayer {
        self.conv(
            cin,
            cout,
            Window {
                k: 1,
                stride: 1,
                pad: 0,
            },
            true,
        )
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// He-style fan-in scaled uniform initialization, times a per-layer gain;
/// biases start at zero.
pub(crate) fn init_layers<'a, T: Real>(
    layers: impl IntoIterator<Item = (&'a ConvLayer, f64)>,
    total: usize,
    rng: &mut SeededRng,
) -> Vec<T> {
    let mut values = vec![T::zero(); total];
    for (layer, gain) in layers {
        let bound = gain * (6.0 / layer.fan_in() as f64).sqrt();
        for v in &mut values[layer.weight.range()] {
            *v = T::lit(rng.uniform(-bound, bound));
        }
    }
    values
}
