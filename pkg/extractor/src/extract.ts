/** Folder-to-COZF extraction pipeline.
 *
 * The input directory follows the usual inspection-dataset layout: one
 * subdirectory per class, where images under "good" are labeled normal and
 * everything else anomalous. Ground-truth masks are looked up per anomalous
 * image under a sibling ground_truth/<class>/<stem>_mask.png (inside the
 * input directory or next to it) and are max-pooled onto the patch grid.
 * Undecodable images are skipped with a warning and recorded in the
 * manifest written next to the output file.
 */

import * as fs from 'fs'
import * as path from 'path'

import { Backbone, STAGE_CHANNELS, buildBackbone, forwardTaps, loadWeights } from './backbone'
import { encodeCozf } from './cozf'
import { maskToGrid, resizeRgb, toBinaryMask, toNormalizedTensor } from './image'
import { decodePng } from './png'
import { Tensor, upsampleBilinear } from './tensor'

export interface ExtractConfig {
  inputDir: string
  output: string
  imageSize?: number // default 256
  layers?: number[] // default [2, 3]
  device?: string // informational; only "cpu" is available
  batch?: number // images per progress tick
  weights?: string // optional COZW file with pretrained parameters
  seed?: number // frozen-initializer seed when no weights are given
}

export interface ManifestEntry {
  file: string
  class: string
  label?: 0 | 1
  maskFound?: boolean
  skipped?: string
}

export interface ExtractResult {
  output: string
  manifest: string
  nImages: number
  gridH: number
  gridW: number
  featDim: number
  skipped: number
}

const IMAGE_EXT = new Set(['.png'])

function listImageDirs(inputDir: string): Array<{ className: string; dir: string }> {
  const entries = fs.readdirSync(inputDir, { withFileTypes: true })
  const dirs = entries
    .filter((e) => e.isDirectory() && e.name !== 'ground_truth')
    .map((e) => ({ className: e.name, dir: path.join(inputDir, e.name) }))
    .filter(({ dir }) =>
      fs.readdirSync(dir).some((f) => IMAGE_EXT.has(path.extname(f).toLowerCase())),
    )
  if (dirs.length > 0) return dirs.sort((a, b) => a.className.localeCompare(b.className))
  if (entries.some((e) => e.isFile() && IMAGE_EXT.has(path.extname(e.name).toLowerCase()))) {
    return [{ className: path.basename(inputDir), dir: inputDir }]
  }
  return []
}

function findMask(inputDir: string, className: string, imageFile: string): string | null {
  const stem = path.basename(imageFile, path.extname(imageFile))
  const candidates = [
    path.join(inputDir, 'ground_truth', className, `${stem}_mask.png`),
    path.join(inputDir, '..', 'ground_truth', className, `${stem}_mask.png`),
    path.join(inputDir, 'ground_truth', className, `${stem}.png`),
  ]
  for (const candidate of candidates) {
    if (fs.existsSync(candidate)) return candidate
  }
  return null
}

export function extract(config: ExtractConfig): ExtractResult {
  const imageSize = config.imageSize ?? 256
  const layers = [...(config.layers ?? [2, 3])].sort((a, b) => a - b)
  if (layers.length === 0) throw new Error('layers must be non-empty')
  if (layers.some((l) => !(l in STAGE_CHANNELS))) {
    throw new Error(`layers must be a subset of {1,2,3,4}, got ${layers.join(',')}`)
  }
  if (new Set(layers).size !== layers.length) throw new Error('duplicate layer tap')
  if (imageSize < 64) throw new Error('image size must be >= 64')
  if ((config.device ?? 'cpu') !== 'cpu') throw new Error('only the cpu device is available')

  const classDirs = listImageDirs(config.inputDir)
  const images: Array<{ className: string; file: string }> = []
  for (const { className, dir } of classDirs) {
    for (const file of fs.readdirSync(dir).sort()) {
      if (IMAGE_EXT.has(path.extname(file).toLowerCase())) {
        images.push({ className, file: path.join(dir, file) })
      }
    }
  }
  if (images.length === 0) throw new Error(`no images found under ${config.inputDir}`)

  const backbone: Backbone = buildBackbone(config.seed ?? 0, Math.max(...layers))
  if (config.weights) loadWeights(backbone, config.weights)
  const featDim = layers.reduce((sum, l) => sum + STAGE_CHANNELS[l], 0)

  const manifest: ManifestEntry[] = []
  const grids: Float32Array[] = []
  const labels: number[] = []
  const masks: Uint8Array[] = []
  let anyMask = false
  let gridH = 0
  let gridW = 0
  const batch = Math.max(1, config.batch ?? 8)

  for (const [index, { className, file }] of images.entries()) {
    let patchGrid: Float32Array
    try {
      const decoded = decodePng(fs.readFileSync(file))
      const input = toNormalizedTensor(resizeRgb(decoded, imageSize))
      const taps = forwardTaps(backbone, input, layers)
      const reference = taps.get(layers[0]) as Tensor
      if (gridH === 0) {
        gridH = reference.h
        gridW = reference.w
      }
      const aligned = layers.map((l) => upsampleBilinear(taps.get(l) as Tensor, gridH, gridW))
      patchGrid = concatToPatchGrid(aligned, gridH, gridW, featDim)
    } catch (err) {
      const reason = (err as Error).message
      console.error(`warning: skipping ${file}: ${reason}`)
      manifest.push({ file, class: className, skipped: reason })
      continue
    }
    const label: 0 | 1 = className === 'good' ? 0 : 1
    let grid: Uint8Array = new Uint8Array(gridH * gridW)
    let maskFound = false
    if (label === 1) {
      const maskPath = findMask(config.inputDir, className, file)
      if (maskPath) {
        try {
          grid = maskToGrid(toBinaryMask(decodePng(fs.readFileSync(maskPath))), gridH, gridW)
          maskFound = true
          anyMask = true
        } catch (err) {
          console.error(`warning: unreadable mask ${maskPath}: ${(err as Error).message}`)
        }
      }
    }
    grids.push(patchGrid)
    labels.push(label)
    masks.push(grid)
    manifest.push({ file, class: className, label, maskFound })
    if ((index + 1) % batch === 0 || index === images.length - 1) {
      console.error(`extracted ${index + 1}/${images.length}`)
    }
  }

  if (grids.length === 0) throw new Error('every input image was skipped')

  const n = grids.length
  const features = new Float32Array(n * gridH * gridW * featDim)
  grids.forEach((g, i) => features.set(g, i * g.length))
  const file = encodeCozf({
    nImages: n,
    gridH,
    gridW,
    featDim,
    features,
    labels: new Uint8Array(labels),
    masks: anyMask ? concatMasks(masks) : undefined,
    meta: `extractor: ${backbone.descriptor} layers=${layers.join(',')} size=${imageSize}`,
  })
  fs.writeFileSync(config.output, file)
  const manifestPath = `${config.output}.manifest.json`
  fs.writeFileSync(manifestPath, JSON.stringify({ images: manifest }, null, 2) + '\n')
  return {
    output: config.output,
    manifest: manifestPath,
    nImages: n,
    gridH,
    gridW,
    featDim,
    skipped: manifest.filter((m) => m.skipped).length,
  }
}

/** CHW stage outputs to an HWC patch grid row-major over (y, x). */
function concatToPatchGrid(aligned: Tensor[], gridH: number, gridW: number, featDim: number): Float32Array {
  const out = new Float32Array(gridH * gridW * featDim)
  for (let y = 0; y < gridH; y++) {
    for (let x = 0; x < gridW; x++) {
      let offset = (y * gridW + x) * featDim
      for (const t of aligned) {
        const plane = y * t.w + x
        for (let c = 0; c < t.c; c++) out[offset++] = t.data[c * t.h * t.w + plane]
      }
    }
  }
  return out
}

function concatMasks(masks: Uint8Array[]): Uint8Array {
  const out = new Uint8Array(masks.length * masks[0].length)
  masks.forEach((m, i) => out.set(m, i * m.length))
  return out
}
