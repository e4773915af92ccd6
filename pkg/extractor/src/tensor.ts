/** CHW float tensors and the handful of ops the backbone needs. Convolutions
 * go through im2col plus a blocked matmul, which keeps the 3x3 layers fast
 * enough for CPU-only extraction. */

export interface Tensor {
  data: Float32Array
  c: number
  h: number
  w: number
}

export function tensor(c: number, h: number, w: number): Tensor {
  return { data: new Float32Array(c * h * w), c, h, w }
}

export interface ConvSpec {
  /** [outC, inC * kh * kw] row-major */
  weight: Float32Array
  inC: number
  outC: number
  kernel: number
  stride: number
  pad: number
  /** folded batchnorm: y = scale * conv + shift, per output channel */
  scale?: Float32Array
  shift?: Float32Array
}

function im2col(x: Tensor, kernel: number, stride: number, pad: number): { cols: Float32Array; oh: number; ow: number } {
  const oh = Math.floor((x.h + 2 * pad - kernel) / stride) + 1
  const ow = Math.floor((x.w + 2 * pad - kernel) / stride) + 1
  const patch = x.c * kernel * kernel
  const cols = new Float32Array(oh * ow * patch)
  for (let c = 0; c < x.c; c++) {
    const plane = c * x.h * x.w
    for (let ky = 0; ky < kernel; ky++) {
      for (let kx = 0; kx < kernel; kx++) {
        const col = (c * kernel + ky) * kernel + kx
        for (let oy = 0; oy < oh; oy++) {
          const sy = oy * stride + ky - pad
          if (sy < 0 || sy >= x.h) continue
          const srow = plane + sy * x.w
          const drow = (oy * ow) * patch + col
          for (let ox = 0; ox < ow; ox++) {
            const sx = ox * stride + kx - pad
            if (sx < 0 || sx >= x.w) continue
            cols[drow + ox * patch] = x.data[srow + sx]
          }
        }
      }
    }
  }
  return { cols, oh, ow }
}

export function conv2d(x: Tensor, spec: ConvSpec): Tensor {
  if (x.c !== spec.inC) throw new Error(`conv expects ${spec.inC} channels, got ${x.c}`)
  const { cols, oh, ow } = im2col(x, spec.kernel, spec.stride, spec.pad)
  const patch = spec.inC * spec.kernel * spec.kernel
  // cols: [oh*ow, patch]; weight row-major [outC, patch] -> multiply as
  // cols x weight^T by streaming over the weight rows.
  const out = tensor(spec.outC, oh, ow)
  const pixels = oh * ow
  for (let oc = 0; oc < spec.outC; oc++) {
    const wrow = oc * patch
    const plane = oc * pixels
    for (let p = 0; p < pixels; p++) {
      const crow = p * patch
      let acc = 0
      for (let t = 0; t < patch; t++) acc += cols[crow + t] * spec.weight[wrow + t]
      out.data[plane + p] = acc
    }
  }
  if (spec.scale && spec.shift) {
    for (let oc = 0; oc < spec.outC; oc++) {
      const s = spec.scale[oc]
      const b = spec.shift[oc]
      const plane = oc * pixels
      for (let p = 0; p < pixels; p++) out.data[plane + p] = out.data[plane + p] * s + b
    }
  }
  return out
}

export function reluInPlace(x: Tensor): Tensor {
  const d = x.data
  for (let i = 0; i < d.length; i++) if (d[i] < 0) d[i] = 0
  return x
}

export function addInPlace(x: Tensor, y: Tensor): Tensor {
  for (let i = 0; i < x.data.length; i++) x.data[i] += y.data[i]
  return x
}

export function maxPool2d(x: Tensor, kernel: number, stride: number, pad: number): Tensor {
  const oh = Math.floor((x.h + 2 * pad - kernel) / stride) + 1
  const ow = Math.floor((x.w + 2 * pad - kernel) / stride) + 1
  const out = tensor(x.c, oh, ow)
  for (let c = 0; c < x.c; c++) {
    const plane = c * x.h * x.w
    const oplane = c * oh * ow
    for (let oy = 0; oy < oh; oy++) {
      for (let ox = 0; ox < ow; ox++) {
        let best = -Infinity
        for (let ky = 0; ky < kernel; ky++) {
          const sy = oy * stride + ky - pad
          if (sy < 0 || sy >= x.h) continue
          for (let kx = 0; kx < kernel; kx++) {
            const sx = ox * stride + kx - pad
            if (sx < 0 || sx >= x.w) continue
            const v = x.data[plane + sy * x.w + sx]
            if (v > best) best = v
          }
        }
        out.data[oplane + oy * ow + ox] = best
      }
    }
  }
  return out
}

/** Bilinear resize with half-pixel centers (align_corners=false semantics). */
export function upsampleBilinear(x: Tensor, oh: number, ow: number): Tensor {
  if (oh === x.h && ow === x.w) return x
  const out = tensor(x.c, oh, ow)
  const scaleY = x.h / oh
  const scaleX = x.w / ow
  for (let oy = 0; oy < oh; oy++) {
    let sy = (oy + 0.5) * scaleY - 0.5
    if (sy < 0) sy = 0
    const y0 = Math.min(Math.floor(sy), x.h - 1)
    const y1 = Math.min(y0 + 1, x.h - 1)
    const fy = sy - y0
    for (let ox = 0; ox < ow; ox++) {
      let sx = (ox + 0.5) * scaleX - 0.5
      if (sx < 0) sx = 0
      const x0 = Math.min(Math.floor(sx), x.w - 1)
      const x1 = Math.min(x0 + 1, x.w - 1)
      const fx = sx - x0
      for (let c = 0; c < x.c; c++) {
        const plane = c * x.h * x.w
        const v =
          (1 - fy) * (1 - fx) * x.data[plane + y0 * x.w + x0] +
          (1 - fy) * fx * x.data[plane + y0 * x.w + x1] +
          fy * (1 - fx) * x.data[plane + y1 * x.w + x0] +
          fy * fx * x.data[plane + y1 * x.w + x1]
        out.data[(c * oh + oy) * ow + ox] = v
      }
    }
  }
  return out
}
