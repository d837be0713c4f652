import { describe, expect, it } from 'vitest'

import {
  DepthImage,
  FeatureGrid,
  decodeDpt,
  decodeFeat,
  encodeDpt,
  encodeFeat,
} from '../src/formats'
import { mulberry32 } from '../src/rng'

function randomGrid(seed: number, gridH: number, gridW: number, embedDim: number): FeatureGrid {
  const next = mulberry32(seed)
  const data = new Float32Array(gridH * gridW * embedDim)
  for (let i = 0; i < data.length; i++) data[i] = Math.fround(next() * 2 - 1)
  return { gridH, gridW, embedDim, patch: 14, data }
}

describe('feat encoding', () => {
  it('round-trips seeded grids exactly', () => {
    for (let seed = 0; seed < 20; seed++) {
      const next = mulberry32(1000 + seed)
      const grid = randomGrid(seed, 1 + Math.floor(next() * 5), 1 + Math.floor(next() * 5), 8 + Math.floor(next() * 32))
      const back = decodeFeat(encodeFeat(grid))
      expect(back.gridH).toBe(grid.gridH)
      expect(back.gridW).toBe(grid.gridW)
      expect(back.embedDim).toBe(grid.embedDim)
      expect(back.patch).toBe(14)
      expect(Array.from(back.data)).toEqual(Array.from(grid.data))
    }
  })

  it('lays out the header little-endian with dtype byte 1', () => {
    const grid = randomGrid(7, 2, 3, 4)
    const buf = encodeFeat(grid)
    expect(buf.toString('ascii', 0, 4)).toBe('EPIF')
    expect(buf.readUInt32LE(4)).toBe(1)
    expect(buf.readUInt32LE(8)).toBe(2)
    expect(buf.readUInt32LE(12)).toBe(3)
    expect(buf.readUInt32LE(16)).toBe(4)
    expect(buf.readUInt32LE(20)).toBe(14)
    expect(buf.readUInt8(24)).toBe(1)
    expect(buf.length).toBe(25 + 2 * 3 * 4 * 4)
  })

  it('rejects truncation, trailing bytes and bad magic', () => {
    const buf = encodeFeat(randomGrid(3, 2, 2, 4))
    expect(() => decodeFeat(buf.subarray(0, buf.length - 1))).toThrow(/payload/)
    expect(() => decodeFeat(Buffer.concat([buf, Buffer.from([0])]))).toThrow(/payload/)
    const evil = Buffer.from(buf)
    evil.write('NOPE', 0, 'ascii')
    expect(() => decodeFeat(evil)).toThrow(/magic/)
  })
})

describe('dpt encoding', () => {
  it('round-trips seeded maps exactly', () => {
    const next = mulberry32(99)
    const depth: DepthImage = { height: 13, width: 7, data: new Float32Array(13 * 7) }
    for (let i = 0; i < depth.data.length; i++) depth.data[i] = Math.fround(1 + 3 * next())
    const back = decodeDpt(encodeDpt(depth))
    expect(back.height).toBe(13)
    expect(back.width).toBe(7)
    expect(Array.from(back.data)).toEqual(Array.from(depth.data))
  })

  it('rejects size mismatches', () => {
    const depth: DepthImage = { height: 2, width: 2, data: new Float32Array(4) }
    const buf = encodeDpt(depth)
    expect(() => decodeDpt(buf.subarray(0, 19))).toThrow(/payload/)
    expect(() => decodeDpt(Buffer.concat([buf, Buffer.from([1, 2])]))).toThrow(/payload/)
  })
})
