/** Image preprocessing: bilinear resize and channel normalization into the
 * CHW float layout the backbone consumes. */

import { Image } from './png'
import { Tensor, tensor } from './tensor'

const MEAN = [0.485, 0.456, 0.406]
const STD = [0.229, 0.224, 0.225]

export function resizeRgb(image: Image, size: number): Image {
  if (image.width === size && image.height === size) return image
  const out = new Uint8Array(size * size * 3)
  const scaleY = image.height / size
  const scaleX = image.width / size
  for (let oy = 0; oy < size; oy++) {
    let sy = (oy + 0.5) * scaleY - 0.5
    if (sy < 0) sy = 0
    const y0 = Math.min(Math.floor(sy), image.height - 1)
    const y1 = Math.min(y0 + 1, image.height - 1)
    const fy = sy - y0
    for (let ox = 0; ox < size; ox++) {
      let sx = (ox + 0.5) * scaleX - 0.5
      if (sx < 0) sx = 0
      const x0 = Math.min(Math.floor(sx), image.width - 1)
      const x1 = Math.min(x0 + 1, image.width - 1)
      const fx = sx - x0
      for (let ch = 0; ch < 3; ch++) {
        const v =
          (1 - fy) * (1 - fx) * image.pixels[(y0 * image.width + x0) * 3 + ch] +
          (1 - fy) * fx * image.pixels[(y0 * image.width + x1) * 3 + ch] +
          fy * (1 - fx) * image.pixels[(y1 * image.width + x0) * 3 + ch] +
          fy * fx * image.pixels[(y1 * image.width + x1) * 3 + ch]
        out[(oy * size + ox) * 3 + ch] = Math.round(v)
      }
    }
  }
  return { width: size, height: size, pixels: out }
}

export function toNormalizedTensor(image: Image): Tensor {
  const { width, height, pixels } = image
  const out = tensor(3, height, width)
  for (let ch = 0; ch < 3; ch++) {
    const plane = ch * height * width
    for (let i = 0; i < height * width; i++) {
      out.data[plane + i] = (pixels[i * 3 + ch] / 255 - MEAN[ch]) / STD[ch]
    }
  }
  return out
}

/** Binary mask from an image: any channel above half intensity marks the
 * pixel anomalous. */
export function toBinaryMask(image: Image): { width: number; height: number; mask: Uint8Array } {
  const mask = new Uint8Array(image.width * image.height)
  for (let i = 0; i < mask.length; i++) {
    const base = i * 3
    mask[i] =
      image.pixels[base] > 127 || image.pixels[base + 1] > 127 || image.pixels[base + 2] > 127
        ? 1
        : 0
  }
  return { width: image.width, height: image.height, mask }
}

/** Max-pool a pixel mask down to the patch grid: a patch is anomalous when
 * any of its pixels is. */
export function maskToGrid(
  mask: { width: number; height: number; mask: Uint8Array },
  gridH: number,
  gridW: number,
): Uint8Array {
  const out = new Uint8Array(gridH * gridW)
  for (let y = 0; y < mask.height; y++) {
    const gy = Math.min(Math.floor((y * gridH) / mask.height), gridH - 1)
    for (let x = 0; x < mask.width; x++) {
      if (!mask.mask[y * mask.width + x]) continue
      const gx = Math.min(Math.floor((x * gridW) / mask.width), gridW - 1)
      out[gy * gridW + gx] = 1
    }
  }
  return out
}
