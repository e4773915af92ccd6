/** Minimal PNG codec on top of node:zlib.
 *
 * Decodes 8-bit grayscale, gray+alpha, RGB, RGBA and palette images without
 * interlacing, which covers MVTec-style datasets and their ground-truth
 * masks. The encoder (filter 0 rows) exists for tests and tooling.
 */

import * as zlib from 'zlib'

const SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a])

export interface Image {
  width: number
  height: number
  /** RGB interleaved, length width*height*3 */
  pixels: Uint8Array
}

export class PngError extends Error {}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c
  const pa = Math.abs(p - a)
  const pb = Math.abs(p - b)
  const pc = Math.abs(p - c)
  if (pa <= pb && pa <= pc) return a
  if (pb <= pc) return b
  return c
}

export function decodePng(data: Buffer): Image {
  if (data.length < 8 || !data.subarray(0, 8).equals(SIGNATURE)) {
    throw new PngError('not a PNG file')
  }
  let pos = 8
  let width = 0
  let height = 0
  let bitDepth = 0
  let colorType = 0
  let palette: Buffer | null = null
  const idat: Buffer[] = []
  while (pos + 8 <= data.length) {
    const length = data.readUInt32BE(pos)
    const type = data.toString('latin1', pos + 4, pos + 8)
    const body = data.subarray(pos + 8, pos + 8 + length)
    pos += 12 + length
    if (type === 'IHDR') {
      width = body.readUInt32BE(0)
      height = body.readUInt32BE(4)
      bitDepth = body[8]
      colorType = body[9]
      if (body[12] !== 0) throw new PngError('interlaced PNG not supported')
      if (bitDepth !== 8) throw new PngError(`bit depth ${bitDepth} not supported`)
      if (![0, 2, 3, 4, 6].includes(colorType)) {
        throw new PngError(`color type ${colorType} not supported`)
      }
    } else if (type === 'PLTE') {
      palette = Buffer.from(body)
    } else if (type === 'IDAT') {
      idat.push(Buffer.from(body))
    } else if (type === 'IEND') {
      break
    }
  }
  if (!width || !height) throw new PngError('missing IHDR')
  if (idat.length === 0) throw new PngError('missing IDAT')
  let raw: Buffer
  try {
    raw = zlib.inflateSync(Buffer.concat(idat))
  } catch (err) {
    throw new PngError(`corrupt compressed stream: ${(err as Error).message}`)
  }
  const channels = { 0: 1, 2: 3, 3: 1, 4: 2, 6: 4 }[colorType as 0 | 2 | 3 | 4 | 6]
  const stride = width * channels
  if (raw.length < height * (stride + 1)) throw new PngError('truncated pixel data')

  const lines = new Uint8Array(height * stride)
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)]
    const src = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1))
    const row = lines.subarray(y * stride, (y + 1) * stride)
    const prev = y > 0 ? lines.subarray((y - 1) * stride, y * stride) : null
    for (let x = 0; x < stride; x++) {
      const a = x >= channels ? row[x - channels] : 0
      const b = prev ? prev[x] : 0
      const c = prev && x >= channels ? prev[x - channels] : 0
      let value = src[x]
      if (filter === 1) value += a
      else if (filter === 2) value += b
      else if (filter === 3) value += (a + b) >> 1
      else if (filter === 4) value += paeth(a, b, c)
      else if (filter !== 0) throw new PngError(`unknown filter ${filter}`)
      row[x] = value & 0xff
    }
  }

  const pixels = new Uint8Array(width * height * 3)
  for (let i = 0; i < width * height; i++) {
    const base = i * channels
    let r: number, g: number, b: number
    if (colorType === 2 || colorType === 6) {
      r = lines[base]
      g = lines[base + 1]
      b = lines[base + 2]
    } else if (colorType === 3) {
      if (!palette) throw new PngError('palette image without PLTE')
      const idx = lines[base] * 3
      r = palette[idx]
      g = palette[idx + 1]
      b = palette[idx + 2]
    } else {
      r = g = b = lines[base]
    }
    pixels[i * 3] = r
    pixels[i * 3 + 1] = g
    pixels[i * 3 + 2] = b
  }
  return { width, height, pixels }
}

export function encodePng(image: Image): Buffer {
  const { width, height, pixels } = image
  const stride = width * 3
  const raw = Buffer.alloc(height * (stride + 1))
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0
    raw.set(pixels.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1)
  }
  const ihdr = Buffer.alloc(13)
  ihdr.writeUInt32BE(width, 0)
  ihdr.writeUInt32BE(height, 4)
  ihdr[8] = 8 // bit depth
  ihdr[9] = 2 // RGB
  const chunks = [
    SIGNATURE,
    chunk('IHDR', ihdr),
    chunk('IDAT', zlib.deflateSync(raw)),
    chunk('IEND', Buffer.alloc(0)),
  ]
  return Buffer.concat(chunks)
}

function chunk(type: string, body: Buffer): Buffer {
  const out = Buffer.alloc(12 + body.length)
  out.writeUInt32BE(body.length, 0)
  out.write(type, 4, 'latin1')
  body.copy(out, 8)
  out.writeUInt32BE(crc32(out.subarray(4, 8 + body.length)), 8 + body.length)
  return out
}

let crcTable: Uint32Array | null = null

function crc32(buf: Buffer): number {
  if (!crcTable) {
    crcTable = new Uint32Array(256)
    for (let n = 0; n < 256; n++) {
      let c = n
      for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1
      crcTable[n] = c >>> 0
    }
  }
  let crc = 0xffffffff
  for (const byte of buf) crc = crcTable[(crc ^ byte) & 0xff] ^ (crc >>> 8)
  return (crc ^ 0xffffffff) >>> 0
}
