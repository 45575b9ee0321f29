/**
 * Minimal deterministic 8-bit grayscale PNG encoder plus base64 helpers.
 *
 * The encoder emits zlib "stored" (uncompressed) deflate blocks, which every
 * standard PNG decoder accepts. Masks export with tissue = 255 and air = 0,
 * so the server-side binarization sees exactly the two legal values.
 */

const PNG_SIGNATURE = new Uint8Array([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

const CRC_TABLE: Uint32Array = (() => {
    const table = new Uint32Array(256);
    for (let n = 0; n < 256; n++) {
        let c = n;
        for (let k = 0; k < 8; k++) {
            c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
        }
        table[n] = c >>> 0;
    }
    return table;
})();

function crc32(bytes: Uint8Array): number {
    let crc = 0xffffffff;
    for (let i = 0; i < bytes.length; i++) {
        crc = CRC_TABLE[(crc ^ bytes[i]) & 0xff] ^ (crc >>> 8);
    }
    return (crc ^ 0xffffffff) >>> 0;
}

function adler32(bytes: Uint8Array): number {
    let a = 1;
    let b = 0;
    for (let i = 0; i < bytes.length; i++) {
        a = (a + bytes[i]) % 65521;
        b = (b + a) % 65521;
    }
    return ((b << 16) | a) >>> 0;
}

function u32be(value: number): Uint8Array {
    return new Uint8Array([(value >>> 24) & 0xff, (value >>> 16) & 0xff,
                           (value >>> 8) & 0xff, value & 0xff]);
}

function concat(parts: Uint8Array[]): Uint8Array {
    const total = parts.reduce((n, p) => n + p.length, 0);
    const out = new Uint8Array(total);
    let offset = 0;
    for (const part of parts) {
        out.set(part, offset);
        offset += part.length;
    }
    return out;
}

function chunk(type: string, body: Uint8Array): Uint8Array {
    const typeBytes = new Uint8Array([...type].map((c) => c.charCodeAt(0)));
    const payload = concat([typeBytes, body]);
    return concat([u32be(body.length), payload, u32be(crc32(payload))]);
}

/** Raw scanlines (filter byte 0 per row) wrapped in a stored-block zlib stream. */
function zlibStored(raw: Uint8Array): Uint8Array {
    const parts: Uint8Array[] = [new Uint8Array([0x78, 0x01])];
    const blockSize = 65535;
    for (let offset = 0; offset < raw.length || offset === 0; offset += blockSize) {
        const end = Math.min(offset + blockSize, raw.length);
        const len = end - offset;
        const final = end >= raw.length ? 1 : 0;
        parts.push(new Uint8Array([final, len & 0xff, (len >>> 8) & 0xff,
                                   ~len & 0xff, (~len >>> 8) & 0xff]));
        parts.push(raw.subarray(offset, end));
        if (end >= raw.length) break;
    }
    parts.push(u32be(adler32(raw)));
    return concat(parts);
}

/** Encode a {0,1} plane as an 8-bit grayscale PNG with values {0,255}. */
export function encodeGrayPng(plane: Uint8Array, width: number, height: number): Uint8Array {
    if (plane.length !== width * height) {
        throw new Error(`plane length ${plane.length} != ${width}x${height}`);
    }
    const raw = new Uint8Array(height * (width + 1));
    for (let y = 0; y < height; y++) {
        const rowStart = y * (width + 1);
        raw[rowStart] = 0; // filter: none
        for (let x = 0; x < width; x++) {
            raw[rowStart + 1 + x] = plane[y * width + x] ? 255 : 0;
        }
    }
    const ihdr = concat([u32be(width), u32be(height),
                         new Uint8Array([8, 0, 0, 0, 0])]);
    return concat([PNG_SIGNATURE, chunk("IHDR", ihdr), chunk("IDAT", zlibStored(raw)),
                   chunk("IEND", new Uint8Array(0))]);
}

export function bytesToBase64(bytes: Uint8Array): string {
    if (typeof Buffer !== "undefined") {
        return Buffer.from(bytes).toString("base64");
    }
    let binary = "";
    for (let i = 0; i < bytes.length; i++) {
        binary += String.fromCharCode(bytes[i]);
    }
    return btoa(binary);
}

export function base64ToBytes(b64: string): Uint8Array {
    if (typeof Buffer !== "undefined") {
        return new Uint8Array(Buffer.from(b64, "base64"));
    }
    const binary = atob(b64);
    const out = new Uint8Array(binary.length);
    for (let i = 0; i < binary.length; i++) {
        out[i] = binary.charCodeAt(i);
    }
    return out;
}
