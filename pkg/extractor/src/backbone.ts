/** Wide-residual backbone (50-layer bottleneck layout, doubled inner width)
 * with taps after each of the four stages.
 *
 * Stage output channels are 256 / 512 / 1024 / 2048, so the default tap pair
 * {2,3} concatenates to 1536 features per patch. Weights are frozen: either
 * loaded from a COZW file (converted offline from a pretrained checkpoint,
 * batchnorm folded into per-channel scale/shift) or, when no file is given,
 * drawn deterministically from a seeded He-style initializer. The random
 * variant keeps the architecture and shapes of the pretrained one, which is
 * what desk-scale smoke runs need; real deployments should supply weights.
 */

import * as fs from 'fs'

import { Rng } from './rng'
import { ConvSpec, Tensor, addInPlace, conv2d, maxPool2d, reluInPlace } from './tensor'

export const STAGE_CHANNELS: Record<number, number> = { 1: 256, 2: 512, 3: 1024, 4: 2048 }

interface Bottleneck {
  conv1: ConvSpec
  conv2: ConvSpec
  conv3: ConvSpec
  downsample?: ConvSpec
}

export interface Backbone {
  stem: ConvSpec
  stages: Bottleneck[][]
  descriptor: string
}

function heConv(rng: Rng, inC: number, outC: number, kernel: number, stride: number, pad: number): ConvSpec {
  const weight = new Float32Array(outC * inC * kernel * kernel)
  rng.fillGaussian(weight, Math.sqrt(2.0 / (inC * kernel * kernel)))
  return { weight, inC, outC, kernel, stride, pad }
}

const STAGE_PLANES = [64, 128, 256, 512]
const STAGE_BLOCKS = [3, 4, 6, 3]

/** Build stages 1..maxStage. Weights are drawn in traversal order, so a
 * shallower build is a prefix of a deeper one with the same seed. */
export function buildBackbone(seed: number, maxStage: number = 4): Backbone {
  const rng = new Rng(seed)
  const stem = heConv(rng, 3, 64, 7, 2, 3)
  const stages: Bottleneck[][] = []
  let inC = 64
  for (let s = 0; s < maxStage; s++) {
    const planes = STAGE_PLANES[s]
    const width = planes * 2 // doubled bottleneck width
    const outC = planes * 4
    const blocks: Bottleneck[] = []
    for (let b = 0; b < STAGE_BLOCKS[s]; b++) {
      const stride = b === 0 && s > 0 ? 2 : 1
      const block: Bottleneck = {
        conv1: heConv(rng, inC, width, 1, 1, 0),
        conv2: heConv(rng, width, width, 3, stride, 1),
        conv3: heConv(rng, width, outC, 1, 1, 0),
      }
      if (b === 0) block.downsample = heConv(rng, inC, outC, 1, stride, 0)
      blocks.push(block)
      inC = outC
    }
    stages.push(blocks)
  }
  return { stem, stages, descriptor: `wrn50_2(seeded:${seed})` }
}

function runBlock(x: Tensor, block: Bottleneck): Tensor {
  let out = reluInPlace(conv2d(x, block.conv1))
  out = reluInPlace(conv2d(out, block.conv2))
  out = conv2d(out, block.conv3)
  const identity = block.downsample ? conv2d(x, block.downsample) : x
  return reluInPlace(addInPlace(out, identity))
}

/** Run the backbone and return the outputs of the requested stages (1-4). */
export function forwardTaps(backbone: Backbone, input: Tensor, taps: number[]): Map<number, Tensor> {
  const deepest = Math.max(...taps)
  if (deepest > backbone.stages.length) {
    throw new Error(`backbone built with ${backbone.stages.length} stages, tap ${deepest} requested`)
  }
  let x = maxPool2d(reluInPlace(conv2d(input, backbone.stem)), 3, 2, 1)
  const out = new Map<number, Tensor>()
  for (let s = 1; s <= deepest; s++) {
    for (const block of backbone.stages[s - 1]) x = runBlock(x, block)
    if (taps.includes(s)) out.set(s, x)
  }
  return out
}

// ---------------------------------------------------------------------------
// COZW weight container: magic "COZW", version byte 1, then for every conv in
// traversal order (stem, then stage by stage, block by block: conv1, conv2,
// conv3, downsample when present) the weight tensor followed by per-channel
// scale and shift vectors, all little-endian float32.

const COZW_MAGIC = 'COZW'

function* convsOf(backbone: Backbone): Generator<ConvSpec> {
  yield backbone.stem
  for (const stage of backbone.stages) {
    for (const block of stage) {
      yield block.conv1
      yield block.conv2
      yield block.conv3
      if (block.downsample) yield block.downsample
    }
  }
}

export function loadWeights(backbone: Backbone, path: string): void {
  const data = fs.readFileSync(path)
  if (data.toString('latin1', 0, 4) !== COZW_MAGIC) {
    throw new Error(`${path}: bad magic, expected ${COZW_MAGIC}`)
  }
  if (data[4] !== 1) throw new Error(`${path}: unsupported weight version ${data[4]}`)
  let pos = 5
  const read = (count: number): Float32Array => {
    const bytes = count * 4
    if (pos + bytes > data.length) throw new Error(`${path}: truncated weight file`)
    const out = new Float32Array(count)
    for (let i = 0; i < count; i++) out[i] = data.readFloatLE(pos + i * 4)
    pos += bytes
    return out
  }
  for (const conv of convsOf(backbone)) {
    conv.weight = read(conv.weight.length)
    conv.scale = read(conv.outC)
    conv.shift = read(conv.outC)
  }
  // trailing bytes are fine: a full four-stage file also serves shallower
  // builds, whose traversal is a prefix of the full one
  backbone.descriptor = `wrn50_2(weights:${path.split('/').pop()})`
}

export function saveWeights(backbone: Backbone, path: string): void {
  const parts: Buffer[] = [Buffer.from(COZW_MAGIC, 'latin1'), Buffer.from([1])]
  for (const conv of convsOf(backbone)) {
    const scale = conv.scale ?? new Float32Array(conv.outC).fill(1)
    const shift = conv.shift ?? new Float32Array(conv.outC)
    for (const arr of [conv.weight, scale, shift]) {
      const buf = Buffer.alloc(arr.length * 4)
      for (let i = 0; i < arr.length; i++) buf.writeFloatLE(arr[i], i * 4)
      parts.push(buf)
    }
  }
  fs.writeFileSync(path, Buffer.concat(parts))
}
