use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

impl Tape {
    /// Layer normalisation over a trailing run of axes.
    ///
    /// Statistics are taken per index of the leading (un-normalised) axes.
    /// `gain` and `bias` share one shape, which must equal the first few
    /// normalised axes; they are broadcast over the remaining ones.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axes: &[usize], eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let Some(&from) = axes.first() else {
            return Err(Error::InvalidAxes { axes: vec![], rank });
        };
        let trailing: Vec<usize> = (from..rank).collect();
        if axes != trailing.as_slice() {
            return Err(Error::InvalidAxes {
                axes: axes.to_vec(),
                rank,
            });
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer norm epsilon must be positive, got {eps}")));
        }
        let gshape = self.shape(gain).to_vec();
        if self.shape(bias) != gshape.as_slice()
            || gshape.len() > rank - from
            || gshape.as_slice() != &shape[from..from + gshape.len()]
        {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine shape {gshape:?} must prefix normalised shape {:?}",
                    &shape[from..]
                ),
            ));
        }
        let outer: usize = shape[..from].iter().product();
        let inner: usize = shape[from..].iter().product();
        let span = inner / gshape.iter().product::<usize>().max(1);

        let (xv, gv, bv) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; outer];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            let seg = &xv[o * inner..(o + 1) * inner];
            let mean = seg.iter().sum::<f64>() / inner as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / inner as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[o] = is;
            for (t, &v) in seg.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[o * inner + t] = h;
                out[o * inner + t] = gv[t / span] * h + bv[t / span];
            }
        }
        let value = Tensor::from_parts(shape.clone(), out);
        self.push(
            "layer_norm",
            value,
            &[x, gain, bias],
            Box::new(move |g, inputs, _, needs| {
                let gv = inputs[1].data();
                let gd = g.data();
                let groups = gv.len();
                let mut dx = needs[0].then(|| vec![0.0; gd.len()]);
                let mut dgain = vec![0.0; groups];
                let mut dbias = vec![0.0; groups];
                let mut dh = vec![0.0; inner];
                for o in 0..outer {
                    let go = &gd[o * inner..(o + 1) * inner];
                    let xo = &xhat[o * inner..(o + 1) * inner];
                    let (mut mean_dh, mut mean_dh_x) = (0.0, 0.0);
                    for t in 0..inner {
                        dgain[t / span] += go[t] * xo[t];
                        dbias[t / span] += go[t];
                        dh[t] = go[t] * gv[t / span];
                        mean_dh += dh[t];
                        mean_dh_x += dh[t] * xo[t];
                    }
                    mean_dh /= inner as f64;
                    mean_dh_x /= inner as f64;
                    if let Some(dx) = dx.as_mut() {
                        for t in 0..inner {
                            dx[o * inner + t] = inv_std[o] * (dh[t] - mean_dh - xo[t] * mean_dh_x);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_parts(shape.clone(), d)),
                    needs[1].then(|| Tensor::from_parts(inputs[1].shape().to_vec(), dgain)),
                    needs[2].then(|| Tensor::from_parts(inputs[2].shape().to_vec(), dbias)),
                ]
            }),
        )
    }
}
