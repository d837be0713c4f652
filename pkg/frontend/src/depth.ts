/**
 * Monocular depth stand-in: a smooth relative-depth field derived from
 * heavily blurred luma, min-max normalized into [1, 4] to match the
 * conventions of the synthetic harness on the consuming side. Relative
 * depth with unknown scale is all the downstream warping needs; it
 * re-randomizes scale during training anyway.
 */

import { DepthImage } from './formats'
import { RgbImage, luma } from './image'

const BLUR_RADIUS = 9
const BLUR_PASSES = 3
const DEPTH_MIN = 1
const DEPTH_MAX = 4

/** One separable box-blur pass with edge clamping. */
function boxBlur(src: Float64Array, height: number, width: number, radius: number): Float64Array {
  const tmp = new Float64Array(src.length)
  const out = new Float64Array(src.length)
  const span = 2 * radius + 1
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      let acc = 0
      for (let d = -radius; d <= radius; d++) {
        const xx = Math.max(0, Math.min(width - 1, x + d))
        acc += src[y * width + xx]
      }
      tmp[y * width + x] = acc / span
    }
  }
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      let acc = 0
      for (let d = -radius; d <= radius; d++) {
        const yy = Math.max(0, Math.min(height - 1, y + d))
        acc += tmp[yy * width + x]
      }
      out[y * width + x] = acc / span
    }
  }
  return out
}

export function estimateDepth(img: RgbImage): DepthImage {
  let field = luma(img)
  for (let pass = 0; pass < BLUR_PASSES; pass++) {
    field = boxBlur(field, img.height, img.width, BLUR_RADIUS)
  }
  let lo = Infinity
  let hi = -Infinity
  for (let i = 0; i < field.length; i++) {
    if (field[i] < lo) lo = field[i]
    if (field[i] > hi) hi = field[i]
  }
  const range = Math.max(hi - lo, 1e-9)
  const data = new Float32Array(field.length)
  for (let i = 0; i < field.length; i++) {
    data[i] = Math.fround(DEPTH_MIN + ((DEPTH_MAX - DEPTH_MIN) * (field[i] - lo)) / range)
  }
  return { height: img.height, width: img.width, data }
}
