/**
 * Small deterministic PRNG so that exports are bit-identical across runs
 * and machines. Not cryptographic; just a stable stream keyed by the
 * weight seed and variant name.
 */

export function fnv1a(text: string): number {
  let h = 0x811c9dc5
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i)
    h = Math.imul(h, 0x01000193)
  }
  return h >>> 0
}

/** mulberry32: 32-bit state, uniform floats in [0, 1). */
export function mulberry32(seed: number): () => number {
  let state = seed >>> 0
  return () => {
    state = (state + 0x6d2b79f5) >>> 0
    let t = state
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

export function weightStream(variant: string, seed: number): () => number {
  return mulberry32(fnv1a(`${variant}:${seed >>> 0}`))
}

/**
 * Zero-mean uniform projection matrix with unit column variance
 * (entries in [-sqrt(3/fanIn), sqrt(3/fanIn)]), rows * cols values,
 * cols innermost.
 */
export function projectionMatrix(rows: number, cols: number, next: () => number): Float64Array {
  const limit = Math.sqrt(3 / cols)
  const out = new Float64Array(rows * cols)
  for (let i = 0; i < out.length; i++) {
    out[i] = (2 * next() - 1) * limit
  }
  return out
}
