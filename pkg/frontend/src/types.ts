/** Wire types for the /v1 API. Field names are bit-exact with the service. */

export interface RleJson {
  w: number;
  h: number;
  counts: number[];
}

export type BboxWire = [number, number, number, number];

export type ControlWire =
  | { points: [number, number, number][] }
  | { box: BboxWire }
  | { trajectory: [number, number][] };

export interface LanguageControlsWire {
  sentiment?: string;
  length?: number | null;
  language?: string;
  factuality?: string;
}

export interface UploadResponse {
  image_id: string;
  width: number;
  height: number;
}

export interface TraceStepWire {
  name: string;
  backend: string | null;
  input_digest: string;
  output: string;
  duration_ms: number;
}

export interface CaptionResponse {
  mask_id: string | null;
  mask: RleJson;
  bbox: BboxWire;
  raw_caption: string;
  category: string | null;
  refined_caption: string | null;
  fallback_used: boolean;
  trace: TraceStepWire[];
}

export interface ToolCallWire {
  tool: string;
  input: string;
  output: string;
}

export interface ChatResponse {
  session_id: string;
  reply: string;
  tool_calls: ToolCallWire[];
}

export interface DenseCaptionWire {
  mask_id: string;
  bbox: BboxWire;
  area: number;
  caption: string;
}

export interface OcrLineWire {
  text: string;
  box: BboxWire;
  confidence: number;
}

export interface ParagraphResponse {
  dense: DenseCaptionWire[];
  ocr: OcrLineWire[];
  prompt: string;
  paragraph: string;
  fallback_used: boolean;
  cache_hit: boolean;
}

export interface HealthResponse {
  status: string;
  backends: Record<string, string>;
  metrics: { segment_cache: { hits: number; misses: number } };
}
