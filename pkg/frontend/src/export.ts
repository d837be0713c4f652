/**
 * Batch export: walk an image directory, write one ".feat" (and
 * optionally one ".dpt") per decodable PNG, plus a manifest recording
 * the preprocessing rule and a sha-256 per output. Everything written is
 * a pure function of the inputs and the job parameters, so re-running a
 * job reproduces every output byte.
 */

import * as fs from 'fs'
import * as path from 'path'

import { PATCH, VARIANTS, extractFeatures } from './backbone'
import { estimateDepth } from './depth'
import { encodeDpt, encodeFeat, sha256Hex } from './formats'
import { centerCropToMultiple, decodePng, resizeBilinear } from './image'

export interface ExportJob {
  imagesDir: string
  outDir: string
  variant: string
  /** Optional "WxH" resize applied before the patch-multiple crop. */
  resize?: { width: number; height: number }
  withDepth: boolean
  /** Stand-in for a weights checkpoint: same seed, same features. */
  seed: number
}

export interface ManifestImage {
  source: string
  width: number
  height: number
  grid: [number, number]
  feat: string
  featSha256: string
  dpt?: string
  dptSha256?: string
}

export interface Manifest {
  variant: string
  embedDim: number
  patch: number
  seed: number
  resize: string | null
  cropRule: string
  errors: number
  images: ManifestImage[]
}

export interface ExportResult {
  manifest: Manifest
  manifestPath: string
}

export function listPngs(dir: string): string[] {
  return fs
    .readdirSync(dir)
    .filter((name) => name.toLowerCase().endsWith('.png'))
    .sort()
}

export function runExport(job: ExportJob, log: (line: string) => void = () => {}): ExportResult {
  const embedDim = VARIANTS[job.variant]
  if (embedDim === undefined) {
    throw new Error(`unknown backbone variant "${job.variant}"`)
  }
  if (!fs.existsSync(job.imagesDir) || !fs.statSync(job.imagesDir).isDirectory()) {
    throw new Error(`image directory not found: ${job.imagesDir}`)
  }
  fs.mkdirSync(job.outDir, { recursive: true })

  const manifest: Manifest = {
    variant: job.variant,
    embedDim,
    patch: PATCH,
    seed: job.seed,
    resize: job.resize ? `${job.resize.width}x${job.resize.height}` : null,
    cropRule: `center-crop to the largest multiple of ${PATCH} per side`,
    errors: 0,
    images: [],
  }

  for (const name of listPngs(job.imagesDir)) {
    const stem = name.replace(/\.png$/i, '')
    let image
    try {
      image = decodePng(fs.readFileSync(path.join(job.imagesDir, name)))
      if (job.resize) {
        image = resizeBilinear(image, job.resize.height, job.resize.width)
      }
      image = centerCropToMultiple(image, PATCH)
    } catch (err) {
      log(`warning: skipping ${name}: ${(err as Error).message}`)
      manifest.errors += 1
      continue
    }

    const grid = extractFeatures(image, job.variant, job.seed)
    const featName = `${stem}.feat`
    const featBytes = encodeFeat(grid)
    fs.writeFileSync(path.join(job.outDir, featName), featBytes)

    const entry: ManifestImage = {
      source: name,
      width: image.width,
      height: image.height,
      grid: [grid.gridH, grid.gridW],
      feat: featName,
      featSha256: sha256Hex(featBytes),
    }

    if (job.withDepth) {
      const dptName = `${stem}.dpt`
      const dptBytes = encodeDpt(estimateDepth(image))
      fs.writeFileSync(path.join(job.outDir, dptName), dptBytes)
      entry.dpt = dptName
      entry.dptSha256 = sha256Hex(dptBytes)
    }

    manifest.images.push(entry)
    log(`${name} -> ${featName} (${grid.gridH}x${grid.gridW} x ${embedDim})`)
  }

  const manifestPath = path.join(job.outDir, 'manifest.json')
  fs.writeFileSync(manifestPath, JSON.stringify(manifest, null, 2) + '\n')
  return { manifest, manifestPath }
}
