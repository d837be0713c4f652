/**
 * Image loading and geometry prep for the exporter: PNG decode to planar
 * RGB floats, optional bilinear resize, and the center-crop that makes
 * both sides divisible by the backbone patch size.
 */

import { PNG } from 'pngjs'

export interface RgbImage {
  height: number
  width: number
  /** height*width*3 values in [0, 1], channel innermost. */
  data: Float64Array
}

export function decodePng(bytes: Buffer): RgbImage {
  const png = PNG.sync.read(bytes)
  const { width, height, data } = png
  const out = new Float64Array(height * width * 3)
  for (let i = 0; i < height * width; i++) {
    out[i * 3] = data[i * 4] / 255
    out[i * 3 + 1] = data[i * 4 + 1] / 255
    out[i * 3 + 2] = data[i * 4 + 2] / 255
  }
  return { height, width, data: out }
}

export function encodePng(img: RgbImage): Buffer {
  const png = new PNG({ width: img.width, height: img.height })
  for (let i = 0; i < img.height * img.width; i++) {
    for (let c = 0; c < 3; c++) {
      const v = Math.max(0, Math.min(1, img.data[i * 3 + c]))
      png.data[i * 4 + c] = Math.floor(v * 255 + 0.5)
    }
    png.data[i * 4 + 3] = 255
  }
  return PNG.sync.write(png)
}

/** Bilinear resample to the requested size (align-corners-off convention). */
export function resizeBilinear(img: RgbImage, height: number, width: number): RgbImage {
  if (height === img.height && width === img.width) return img
  const out = new Float64Array(height * width * 3)
  const sy = img.height / height
  const sx = img.width / width
  for (let y = 0; y < height; y++) {
    const fy = Math.max(0, Math.min(img.height - 1, (y + 0.5) * sy - 0.5))
    const y0 = Math.floor(fy)
    const y1 = Math.min(img.height - 1, y0 + 1)
    const wy = fy - y0
    for (let x = 0; x < width; x++) {
      const fx = Math.max(0, Math.min(img.width - 1, (x + 0.5) * sx - 0.5))
      const x0 = Math.floor(fx)
      const x1 = Math.min(img.width - 1, x0 + 1)
      const wx = fx - x0
      for (let c = 0; c < 3; c++) {
        const a = img.data[(y0 * img.width + x0) * 3 + c]
        const b = img.data[(y0 * img.width + x1) * 3 + c]
        const d = img.data[(y1 * img.width + x0) * 3 + c]
        const e = img.data[(y1 * img.width + x1) * 3 + c]
        const top = a + (b - a) * wx
        const bot = d + (e - d) * wx
        out[(y * width + x) * 3 + c] = top + (bot - top) * wy
      }
    }
  }
  return { height, width, data: out }
}

/**
 * Crop centrally so height and width become the largest multiples of
 * `multiple` that fit. This is the backbone's own grid rule: a 512x640
 * input keeps a 36x45 patch grid at patch 14.
 */
export function centerCropToMultiple(img: RgbImage, multiple: number): RgbImage {
  const height = Math.floor(img.height / multiple) * multiple
  const width = Math.floor(img.width / multiple) * multiple
  if (height === 0 || width === 0) {
    throw new Error(`image ${img.width}x${img.height} smaller than one ${multiple}px patch`)
  }
  if (height === img.height && width === img.width) return img
  const top = Math.floor((img.height - height) / 2)
  const left = Math.floor((img.width - width) / 2)
  const out = new Float64Array(height * width * 3)
  for (let y = 0; y < height; y++) {
    const src = ((y + top) * img.width + left) * 3
    out.set(img.data.subarray(src, src + width * 3), y * width * 3)
  }
  return { height, width, data: out }
}

/** Rec. 601 luma in [0, 1]. */
export function luma(img: RgbImage): Float64Array {
  const out = new Float64Array(img.height * img.width)
  for (let i = 0; i < out.length; i++) {
    out[i] = 0.299 * img.data[i * 3] + 0.587 * img.data[i * 3 + 1] + 0.114 * img.data[i * 3 + 2]
  }
  return out
}
