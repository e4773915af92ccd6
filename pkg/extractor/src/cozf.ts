/** Writer (and a reader for tests) of the COZF feature container consumed by
 * the training engine. Little-endian throughout: magic "COZF", version 1,
 * flag byte (bit0 labels, bit1 masks), two reserved zero bytes, four uint32
 * dims, float32 features image-major row-major, optional label and mask
 * bytes, then a uint32-length UTF-8 meta string. */

export interface FeatureFile {
  nImages: number
  gridH: number
  gridW: number
  featDim: number
  /** length nImages * gridH * gridW * featDim */
  features: Float32Array
  labels?: Uint8Array
  masks?: Uint8Array
  meta: string
}

const MAGIC = 'COZF'

export function encodeCozf(file: FeatureFile): Buffer {
  const { nImages, gridH, gridW, featDim } = file
  const count = nImages * gridH * gridW * featDim
  if (file.features.length !== count) {
    throw new Error(`feature payload ${file.features.length} != ${count}`)
  }
  if (file.labels && file.labels.length !== nImages) {
    throw new Error('label payload length mismatch')
  }
  if (file.masks && file.masks.length !== nImages * gridH * gridW) {
    throw new Error('mask payload length mismatch')
  }
  const metaBytes = Buffer.from(file.meta, 'utf-8')
  let flags = 0
  if (file.labels) flags |= 1
  if (file.masks) flags |= 2
  const size =
    8 + 16 + count * 4 + (file.labels?.length ?? 0) + (file.masks?.length ?? 0) + 4 + metaBytes.length
  const out = Buffer.alloc(size)
  let pos = 0
  out.write(MAGIC, pos, 'latin1')
  pos += 4
  out[pos++] = 1
  out[pos++] = flags
  pos += 2 // reserved
  for (const dim of [nImages, gridH, gridW, featDim]) {
    out.writeUInt32LE(dim, pos)
    pos += 4
  }
  for (let i = 0; i < count; i++) {
    out.writeFloatLE(file.features[i], pos)
    pos += 4
  }
  if (file.labels) {
    Buffer.from(file.labels).copy(out, pos)
    pos += file.labels.length
  }
  if (file.masks) {
    Buffer.from(file.masks).copy(out, pos)
    pos += file.masks.length
  }
  out.writeUInt32LE(metaBytes.length, pos)
  pos += 4
  metaBytes.copy(out, pos)
  return out
}

export function decodeCozf(data: Buffer): FeatureFile {
  if (data.toString('latin1', 0, 4) !== MAGIC) throw new Error('bad magic')
  if (data[4] !== 1) throw new Error(`unsupported version ${data[4]}`)
  const flags = data[5]
  const nImages = data.readUInt32LE(8)
  const gridH = data.readUInt32LE(12)
  const gridW = data.readUInt32LE(16)
  const featDim = data.readUInt32LE(20)
  let pos = 24
  const count = nImages * gridH * gridW * featDim
  const features = new Float32Array(count)
  for (let i = 0; i < count; i++) {
    features[i] = data.readFloatLE(pos)
    pos += 4
  }
  let labels: Uint8Array | undefined
  if (flags & 1) {
    labels = new Uint8Array(data.subarray(pos, pos + nImages))
    pos += nImages
  }
  let masks: Uint8Array | undefined
  if (flags & 2) {
    masks = new Uint8Array(data.subarray(pos, pos + nImages * gridH * gridW))
    pos += nImages * gridH * gridW
  }
  const metaLen = data.readUInt32LE(pos)
  pos += 4
  const meta = data.toString('utf-8', pos, pos + metaLen)
  return { nImages, gridH, gridW, featDim, features, labels, masks, meta }
}
