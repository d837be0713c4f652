#!/usr/bin/env node
/**
 * Exporter command line.
 *
 *   epimatch-export export --images <dir> --out <dir> --variant base \
 *       [--resize 512x644] [--depth] [--seed N]
 *
 * Writes one ".feat" per PNG (plus ".dpt" with --depth) and a
 * "manifest.json" listing outputs with sha-256 digests.
 */

import yargs from 'yargs'
import { hideBin } from 'yargs/helpers'

import { VARIANTS } from './backbone'
import { ExportJob, runExport } from './export'

function parseResize(text: string): { width: number; height: number } {
  const m = /^(\d+)x(\d+)$/.exec(text)
  if (!m) {
    throw new Error(`--resize expects WxH (e.g. 512x644), got "${text}"`)
  }
  return { width: Number(m[1]), height: Number(m[2]) }
}

export function main(argv: string[]): number {
  let failed = false
  yargs(argv)
    .scriptName('epimatch-export')
    .command(
      'export',
      'export features (and optionally depth) for a directory of PNGs',
      (cmd) =>
        cmd
          .option('images', { type: 'string', demandOption: true, describe: 'input image directory' })
          .option('out', { type: 'string', demandOption: true, describe: 'output directory' })
          .option('variant', {
            type: 'string',
            default: 'base',
            choices: Object.keys(VARIANTS),
            describe: 'backbone variant (sets the embedding width)',
          })
          .option('resize', { type: 'string', describe: 'resize to WxH before the patch crop' })
          .option('depth', { type: 'boolean', default: false, describe: 'also write .dpt depth maps' })
          .option('seed', { type: 'number', default: 0, describe: 'weight seed (fixed checkpoint stand-in)' }),
      (args) => {
        const job: ExportJob = {
          imagesDir: args.images,
          outDir: args.out,
          variant: args.variant,
          resize: args.resize !== undefined ? parseResize(args.resize) : undefined,
          withDepth: args.depth,
          seed: args.seed,
        }
        const { manifest } = runExport(job, (line) => console.error(line))
        console.error(`wrote ${manifest.images.length} image(s), ${manifest.errors} error(s)`)
      },
    )
    .demandCommand(1, 'specify a command (export)')
    .strict()
    .fail((msg, err) => {
      console.error(err ? err.message : msg)
      failed = true
    })
    .parseSync()
  return failed ? 1 : 0
}

if (require.main === module) {
  process.exit(main(hideBin(process.argv)))
}
