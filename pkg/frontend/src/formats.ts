/**
 * Binary writers/readers for the ".feat" and ".dpt" interchange formats.
 *
 * Both are little-endian regardless of host:
 *
 *   .feat  "EPIF" | u32 version=1 | u32 gridH | u32 gridW | u32 embedDim
 *          | u32 patch | u8 dtype (1 = float32) | payload (gridH*gridW*embedDim
 *          f32, row-major, embedDim innermost)
 *
 *   .dpt   "EPID" | u32 version=1 | u32 height | u32 width | payload
 *          (height*width f32, row-major)
 *
 * The consumer rejects trailing bytes, so writers emit exactly the header
 * plus payload and nothing else.
 */

import { createHash } from 'crypto'

export const FEAT_MAGIC = 'EPIF'
export const DPT_MAGIC = 'EPID'
export const FORMAT_VERSION = 1
export const DTYPE_F32 = 1

export interface FeatureGrid {
  gridH: number
  gridW: number
  embedDim: number
  patch: number
  /** gridH*gridW*embedDim values, embedDim innermost. */
  data: Float32Array
}

export interface DepthImage {
  height: number
  width: number
  /** height*width values, row-major. */
  data: Float32Array
}

function f32leBytes(values: Float32Array): Buffer {
  const buf = Buffer.alloc(values.length * 4)
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength)
  for (let i = 0; i < values.length; i++) {
    view.setFloat32(i * 4, values[i], true)
  }
  return buf
}

function f32leValues(buf: Buffer, count: number): Float32Array {
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength)
  const out = new Float32Array(count)
  for (let i = 0; i < count; i++) {
    out[i] = view.getFloat32(i * 4, true)
  }
  return out
}

export function encodeFeat(grid: FeatureGrid): Buffer {
  const n = grid.gridH * grid.gridW * grid.embedDim
  if (grid.data.length !== n) {
    throw new Error(`feature payload has ${grid.data.length} values, expected ${n}`)
  }
  const header = Buffer.alloc(25)
  header.write(FEAT_MAGIC, 0, 'ascii')
  header.writeUInt32LE(FORMAT_VERSION, 4)
  header.writeUInt32LE(grid.gridH, 8)
  header.writeUInt32LE(grid.gridW, 12)
  header.writeUInt32LE(grid.embedDim, 16)
  header.writeUInt32LE(grid.patch, 20)
  header.writeUInt8(DTYPE_F32, 24)
  return Buffer.concat([header, f32leBytes(grid.data)])
}

export function decodeFeat(buf: Buffer): FeatureGrid {
  if (buf.length < 25 || buf.toString('ascii', 0, 4) !== FEAT_MAGIC) {
    throw new Error('not a .feat file (bad magic)')
  }
  const version = buf.readUInt32LE(4)
  if (version !== FORMAT_VERSION) {
    throw new Error(`unsupported .feat version ${version}`)
  }
  const gridH = buf.readUInt32LE(8)
  const gridW = buf.readUInt32LE(12)
  const embedDim = buf.readUInt32LE(16)
  const patch = buf.readUInt32LE(20)
  const dtype = buf.readUInt8(24)
  if (dtype !== DTYPE_F32) {
    throw new Error(`unsupported .feat dtype code ${dtype}`)
  }
  const n = gridH * gridW * embedDim
  if (buf.length !== 25 + n * 4) {
    throw new Error(`bad .feat payload size: ${buf.length - 25} bytes for ${n} values`)
  }
  return { gridH, gridW, embedDim, patch, data: f32leValues(buf.subarray(25), n) }
}

export function encodeDpt(depth: DepthImage): Buffer {
  const n = depth.height * depth.width
  if (depth.data.length !== n) {
    throw new Error(`depth payload has ${depth.data.length} values, expected ${n}`)
  }
  const header = Buffer.alloc(16)
  header.write(DPT_MAGIC, 0, 'ascii')
  header.writeUInt32LE(FORMAT_VERSION, 4)
  header.writeUInt32LE(depth.height, 8)
  header.writeUInt32LE(depth.width, 12)
  return Buffer.concat([header, f32leBytes(depth.data)])
}

export function decodeDpt(buf: Buffer): DepthImage {
  if (buf.length < 16 || buf.toString('ascii', 0, 4) !== DPT_MAGIC) {
    throw new Error('not a .dpt file (bad magic)')
  }
  const version = buf.readUInt32LE(4)
  if (version !== FORMAT_VERSION) {
    throw new Error(`unsupported .dpt version ${version}`)
  }
  const height = buf.readUInt32LE(8)
  const width = buf.readUInt32LE(12)
  const n = height * width
  if (buf.length !== 16 + n * 4) {
    throw new Error(`bad .dpt payload size: ${buf.length - 16} bytes for ${n} values`)
  }
  return { height, width, data: f32leValues(buf.subarray(16), n) }
}

export function sha256Hex(buf: Buffer): string {
  return createHash('sha256').update(buf).digest('hex')
}
