#!/usr/bin/env node
/** CLI: `extract --input DIR --out FILE [--layers 2,3] [--size 256]
 * [--weights FILE] [--seed N] [--batch N]`. Exit codes: 0 success, 1 runtime
 * error, 2 usage error. */

import { extract } from './extract'

function usage(message?: string): never {
  if (message) console.error(`error: ${message}`)
  console.error(
    'usage: cozad-extract extract --input DIR --out FILE [--layers 2,3] ' +
      '[--size 256] [--weights FILE] [--seed N] [--batch N]',
  )
  process.exit(2)
}

export function main(argv: string[]): number {
  if (argv.length === 0 || argv[0] !== 'extract') usage('expected the extract subcommand')
  const args = new Map<string, string>()
  for (let i = 1; i < argv.length; i += 2) {
    const key = argv[i]
    if (!key.startsWith('--')) usage(`unexpected argument ${key}`)
    if (i + 1 >= argv.length) usage(`missing value for ${key}`)
    args.set(key.slice(2), argv[i + 1])
  }
  const known = new Set(['input', 'out', 'layers', 'size', 'weights', 'seed', 'batch'])
  for (const key of args.keys()) if (!known.has(key)) usage(`unknown flag --${key}`)
  const input = args.get('input')
  const out = args.get('out')
  if (!input || !out) usage('--input and --out are required')

  try {
    const result = extract({
      inputDir: input,
      output: out,
      imageSize: args.has('size') ? Number(args.get('size')) : undefined,
      layers: args.has('layers') ? args.get('layers')!.split(',').map(Number) : undefined,
      weights: args.get('weights'),
      seed: args.has('seed') ? Number(args.get('seed')) : undefined,
      batch: args.has('batch') ? Number(args.get('batch')) : undefined,
    })
    console.log(
      `wrote ${result.output}: ${result.nImages} images, grid ` +
        `${result.gridH}x${result.gridW}, feat_dim ${result.featDim}` +
        (result.skipped ? `, skipped ${result.skipped}` : ''),
    )
    return 0
  } catch (err) {
    console.error(`error: ${(err as Error).message}`)
    return 1
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)))
}
