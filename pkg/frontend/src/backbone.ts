/**
 * Deterministic stand-in for the pretrained backbone.
 *
 * Real deployments run a frozen vision transformer here; this sandbox has
 * no weight downloads, so the exporter ships a seeded projection head
 * over hand-computed patch statistics instead. What matters downstream
 * is the contract, which is identical: one embedDim-vector per 14x14
 * patch, row-major grid, float32, bit-identical re-export for the same
 * inputs, seed and variant.
 */

import { FeatureGrid } from './formats'
import { RgbImage } from './image'
import { projectionMatrix, weightStream } from './rng'

export const PATCH = 14

/** Embedding width per published variant of the backbone family. */
export const VARIANTS: Record<string, number> = {
  small: 384,
  base: 768,
  large: 1024,
}

const DCT_BLOCK = 4 // low-frequency 4x4 corner of the patch DCT
const RAW_DIM = DCT_BLOCK * DCT_BLOCK + 4 // + RGB means + luma std

// cos(pi * (i + 0.5) * u / PATCH) for u < DCT_BLOCK
const DCT_TABLE = (() => {
  const table = new Float64Array(DCT_BLOCK * PATCH)
  for (let u = 0; u < DCT_BLOCK; u++) {
    for (let i = 0; i < PATCH; i++) {
      table[u * PATCH + i] = Math.cos((Math.PI * (i + 0.5) * u) / PATCH)
    }
  }
  return table
})()

/** Low-frequency stats of one patch: 4x4 DCT of luma, RGB means, luma std. */
function patchDescriptor(img: RgbImage, top: number, left: number, out: Float64Array): void {
  const L = new Float64Array(PATCH * PATCH)
  let mr = 0
  let mg = 0
  let mb = 0
  for (let y = 0; y < PATCH; y++) {
    for (let x = 0; x < PATCH; x++) {
      const i = ((top + y) * img.width + (left + x)) * 3
      const r = img.data[i]
      const g = img.data[i + 1]
      const b = img.data[i + 2]
      mr += r
      mg += g
      mb += b
      L[y * PATCH + x] = 0.299 * r + 0.587 * g + 0.114 * b
    }
  }
  const n = PATCH * PATCH

  let k = 0
  for (let u = 0; u < DCT_BLOCK; u++) {
    for (let v = 0; v < DCT_BLOCK; v++) {
      let acc = 0
      for (let y = 0; y < PATCH; y++) {
        const cy = DCT_TABLE[u * PATCH + y]
        for (let x = 0; x < PATCH; x++) {
          acc += L[y * PATCH + x] * cy * DCT_TABLE[v * PATCH + x]
        }
      }
      out[k++] = acc / n
    }
  }

  let mean = 0
  for (let i = 0; i < n; i++) mean += L[i]
  mean /= n
  let varsum = 0
  for (let i = 0; i < n; i++) {
    const d = L[i] - mean
    varsum += d * d
  }
  out[k++] = mr / n
  out[k++] = mg / n
  out[k++] = mb / n
  out[k] = Math.sqrt(varsum / n)
}

/**
 * Map an image (already cropped to patch multiples) to its feature grid.
 * The projection weights are a pure function of (variant, seed), standing
 * in for a fixed weight checkpoint.
 */
export function extractFeatures(img: RgbImage, variant: string, seed: number): FeatureGrid {
  const embedDim = VARIANTS[variant]
  if (embedDim === undefined) {
    throw new Error(`unknown backbone variant "${variant}" (have: ${Object.keys(VARIANTS).join(', ')})`)
  }
  if (img.height % PATCH || img.width % PATCH) {
    throw new Error('image dimensions must be multiples of the patch size; crop first')
  }
  const gridH = img.height / PATCH
  const gridW = img.width / PATCH
  const weights = projectionMatrix(embedDim, RAW_DIM, weightStream(variant, seed))

  const data = new Float32Array(gridH * gridW * embedDim)
  const raw = new Float64Array(RAW_DIM)
  const embedded = new Float64Array(embedDim)
  for (let gy = 0; gy < gridH; gy++) {
    for (let gx = 0; gx < gridW; gx++) {
      patchDescriptor(img, gy * PATCH, gx * PATCH, raw)
      let norm = 0
      for (let e = 0; e < embedDim; e++) {
        let acc = 0
        for (let j = 0; j < RAW_DIM; j++) {
          acc += weights[e * RAW_DIM + j] * raw[j]
        }
        embedded[e] = acc
        norm += acc * acc
      }
      norm = Math.sqrt(norm) || 1
      const base = (gy * gridW + gx) * embedDim
      for (let e = 0; e < embedDim; e++) {
        data[base + e] = Math.fround(embedded[e] / norm)
      }
    }
  }
  return { gridH, gridW, embedDim, patch: PATCH, data }
}
