/** Thin client for the documented /v1 endpoints; nothing private. */

import type {
  CaptionResponse,
  ChatResponse,
  ControlWire,
  HealthResponse,
  LanguageControlsWire,
  ParagraphResponse,
  RleJson,
  UploadResponse,
} from "./types.js";

export interface CaptionBody {
  control: ControlWire;
  controls?: LanguageControlsWire;
  use_cot?: boolean;
  refine?: boolean;
}

export interface ChatBody {
  session_id?: string;
  control?: ControlWire;
  message: string;
}

export interface ParagraphBody {
  max_regions?: number;
  use_cot?: boolean;
  min_confidence_ocr?: number;
}

export type FetchFn = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchFn = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(method: string, path: string, body?: BodyInit | null, json?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (json !== undefined) {
      init.body = JSON.stringify(json);
      init.headers = { "content-type": "application/json" };
    } else if (body !== undefined) {
      init.body = body;
    }
    const res = await this.fetchFn(this.baseUrl + path, init);
    const payload = await res.json().catch(() => null);
    if (!res.ok) {
      const detail =
        payload && typeof payload === "object" && "error" in payload
          ? String((payload as { error: unknown }).error)
          : res.statusText;
      throw new ApiError(res.status, `${method} ${path}: ${detail}`);
    }
    return payload as T;
  }

  uploadImage(bytes: ArrayBuffer | Uint8Array): Promise<UploadResponse> {
    const body = bytes instanceof Uint8Array ? new Uint8Array(bytes) : bytes;
    return this.request<UploadResponse>("POST", "/v1/images", body as BodyInit);
  }

  caption(imageId: string, body: CaptionBody): Promise<CaptionResponse> {
    return this.request<CaptionResponse>("POST", `/v1/images/${imageId}/caption`, null, body);
  }

  chat(imageId: string, body: ChatBody): Promise<ChatResponse> {
    return this.request<ChatResponse>("POST", `/v1/images/${imageId}/chat`, null, body);
  }

  paragraph(imageId: string, body: ParagraphBody = {}): Promise<ParagraphResponse> {
    return this.request<ParagraphResponse>("POST", `/v1/images/${imageId}/paragraph`, null, body);
  }

  getMask(imageId: string, maskId: string): Promise<RleJson> {
    return this.request<RleJson>("GET", `/v1/images/${imageId}/masks/${maskId}`);
  }

  health(): Promise<HealthResponse> {
    return this.request<HealthResponse>("GET", "/v1/healthz");
  }
}
