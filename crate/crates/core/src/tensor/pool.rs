use super::tape::{GradSink, Op};
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    /// 2×2 max pooling with stride 2. Ties go to the first element in
    /// row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "max pooling needs even spatial extents".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::MaxPool2x2 { x, argmax }))
    }
}

pub(crate) fn maxpool_backward<T: Scalar>(sink: &mut GradSink<'_, T>, x: Var, argmax: &[u32], g: &[T]) {
    if !sink.wants(x) {
        return;
    }
    let dx = sink.buf(x);
    for (&src, &gv) in argmax.iter().zip(g) {
        dx[src as usize] = dx[src as usize] + gv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_of_window() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_requires_grad(true));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_input_routes_to_first_index() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 2.5).unwrap().with_requires_grad(true));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5; 4]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        let hot: Vec<usize> = (0..16).filter(|&i| g[i] == 1.0).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }

    #[test]
    fn odd_extent_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]).unwrap());
        assert!(matches!(tape.maxpool2d(x), Err(Error::InvalidShape { .. })));
    }
}
