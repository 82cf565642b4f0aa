/**
 * Page controller: canvas selection, caption display, chat panel, and
 * paragraph view, all through the public /v1 API.
 *
 * Panels are independent and allow one in-flight request each; inputs are
 * disabled while a request is pending. A style re-caption reuses the current
 * selection and mask id without touching the overlay.
 */

import { ApiClient } from "./api.js";
import { decodeRle } from "./rle.js";
import { clearLayer, paintBboxHighlight, paintOverlay } from "./overlay.js";
import { SelectionController, type Mode } from "./selection.js";
import type {
  CaptionResponse,
  ControlWire,
  LanguageControlsWire,
  ParagraphResponse,
} from "./types.js";

function must<T extends Element>(doc: Document, id: string): T {
  const el = doc.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as unknown as T;
}

function context2d(canvas: HTMLCanvasElement): CanvasRenderingContext2D | null {
  try {
    return canvas.getContext("2d");
  } catch {
    return null;
  }
}

/** Blob.arrayBuffer with a FileReader fallback (jsdom lacks the former). */
function readBlobBytes(file: Blob): Promise<ArrayBuffer> {
  if (typeof file.arrayBuffer === "function") {
    return file.arrayBuffer();
  }
  return new Promise((resolve, reject) => {
    const reader = new FileReader();
    reader.onload = () => resolve(reader.result as ArrayBuffer);
    reader.onerror = () => reject(reader.error ?? new Error("file read failed"));
    reader.readAsArrayBuffer(file);
  });
}

export class App {
  readonly selection = new SelectionController();
  imageId: string | null = null;
  dims: { w: number; h: number } | null = null;
  lastControl: ControlWire | null = null;
  lastCaption: CaptionResponse | null = null;
  maskId: string | null = null;
  maskBits: Uint8Array | null = null;
  sessionId: string | null = null;
  lastParagraph: ParagraphResponse | null = null;

  captionBusy = false;
  chatBusy = false;
  paragraphBusy = false;

  private readonly fileInput: HTMLInputElement;
  private readonly imageCanvas: HTMLCanvasElement;
  private readonly overlayCanvas: HTMLCanvasElement;
  private readonly highlightCanvas: HTMLCanvasElement;
  private readonly statusLine: HTMLElement;
  private readonly captionOut: HTMLElement;
  private readonly rawOut: HTMLElement;
  private readonly traceOut: HTMLElement;
  private readonly recaptionBtn: HTMLButtonElement;
  private readonly useCot: HTMLInputElement;
  private readonly chatInput: HTMLInputElement;
  private readonly chatSend: HTMLButtonElement;
  private readonly chatLog: HTMLElement;
  private readonly paragraphBtn: HTMLButtonElement;
  private readonly paragraphOut: HTMLElement;
  private readonly regionList: HTMLElement;
  private readonly sceneChip: HTMLElement;

  constructor(
    private readonly doc: Document,
    private readonly api: ApiClient,
  ) {
    this.fileInput = must(doc, "file-input");
    this.imageCanvas = must(doc, "image-canvas");
    this.overlayCanvas = must(doc, "overlay-canvas");
    this.highlightCanvas = must(doc, "highlight-canvas");
    this.statusLine = must(doc, "status-line");
    this.captionOut = must(doc, "caption-output");
    this.rawOut = must(doc, "raw-caption-output");
    this.traceOut = must(doc, "trace-output");
    this.recaptionBtn = must(doc, "recaption-btn");
    this.useCot = must(doc, "use-cot");
    this.chatInput = must(doc, "chat-input");
    this.chatSend = must(doc, "chat-send");
    this.chatLog = must(doc, "chat-log");
    this.paragraphBtn = must(doc, "paragraph-btn");
    this.paragraphOut = must(doc, "paragraph-output");
    this.regionList = must(doc, "region-list");
    this.sceneChip = must(doc, "scene-text-chip");
    this.bind();
  }

  private bind(): void {
    this.fileInput.addEventListener("change", () => {
      const file = this.fileInput.files?.[0];
      if (file) void this.loadImageFile(file);
    });

    for (const mode of ["point", "negative-point", "box", "trajectory"] as Mode[]) {
      must<HTMLButtonElement>(this.doc, `mode-${mode}`).addEventListener("click", () => {
        this.selection.setMode(mode);
        this.setStatus(`mode: ${mode}`);
      });
    }
    must<HTMLButtonElement>(this.doc, "clear-selection").addEventListener("click", () => {
      this.selection.clear();
      this.clearOverlay();
    });

    this.overlayCanvas.addEventListener("mousedown", (ev) => {
      if (!this.imageId || this.captionBusy) return;
      const { x, y } = this.canvasCoords(ev);
      this.selection.begin(x, y, ev.shiftKey || ev.altKey);
    });
    this.overlayCanvas.addEventListener("mousemove", (ev) => {
      const { x, y } = this.canvasCoords(ev);
      this.selection.move(x, y);
    });
    this.overlayCanvas.addEventListener("mouseup", (ev) => {
      if (!this.imageId || this.captionBusy) return;
      const { x, y } = this.canvasCoords(ev);
      const control = this.selection.end(x, y);
      if (control) void this.submitCaption(control);
    });

    this.recaptionBtn.addEventListener("click", () => {
      if (this.lastControl) void this.submitCaption(this.lastControl, true);
    });

    this.chatSend.addEventListener("click", () => void this.sendChat());
    this.chatInput.addEventListener("keydown", (ev) => {
      if ((ev as KeyboardEvent).key === "Enter") void this.sendChat();
    });

    this.paragraphBtn.addEventListener("click", () => void this.requestParagraph());
  }

  setStatus(text: string): void {
    this.statusLine.textContent = text;
  }

  private canvasCoords(ev: MouseEvent): { x: number; y: number } {
    const rect = this.overlayCanvas.getBoundingClientRect();
    const scaleX = rect.width > 0 ? this.overlayCanvas.width / rect.width : 1;
    const scaleY = rect.height > 0 ? this.overlayCanvas.height / rect.height : 1;
    return { x: (ev.clientX - rect.left) * scaleX, y: (ev.clientY - rect.top) * scaleY };
  }

  async loadImageFile(file: Blob): Promise<void> {
    await this.loadImageBytes(await readBlobBytes(file));
  }

  async loadImageBytes(bytes: ArrayBuffer): Promise<void> {
    try {
      const uploaded = await this.api.uploadImage(bytes);
      this.imageId = uploaded.image_id;
      this.dims = { w: uploaded.width, h: uploaded.height };
      for (const canvas of [this.imageCanvas, this.overlayCanvas, this.highlightCanvas]) {
        canvas.width = uploaded.width;
        canvas.height = uploaded.height;
      }
      this.selection.clear();
      this.sessionId = null;
      this.maskId = null;
      this.maskBits = null;
      this.lastCaption = null;
      this.chatLog.textContent = "";
      this.setStatus(`image ${uploaded.image_id.slice(0, 8)} (${uploaded.width}x${uploaded.height})`);
      this.drawImage(bytes);
    } catch (err) {
      this.setStatus(`upload failed: ${(err as Error).message}`);
    }
  }

  /** Best-effort bitmap paint; overlays and state never depend on it. */
  private drawImage(bytes: ArrayBuffer): void {
    const ctx = context2d(this.imageCanvas);
    if (!ctx || typeof URL.createObjectURL !== "function") return;
    const url = URL.createObjectURL(new Blob([bytes]));
    const img = new Image();
    img.onload = () => {
      ctx.drawImage(img, 0, 0);
      URL.revokeObjectURL(url);
    };
    img.src = url;
  }

  styleControls(): LanguageControlsWire {
    const sentiment = must<HTMLSelectElement>(this.doc, "style-sentiment").value;
    const lengthRaw = must<HTMLInputElement>(this.doc, "style-length").value;
    const language = must<HTMLInputElement>(this.doc, "style-language").value;
    const factuality = must<HTMLSelectElement>(this.doc, "style-factuality").value;
    const controls: LanguageControlsWire = {};
    if (sentiment !== "neutral") controls.sentiment = sentiment;
    if (lengthRaw) controls.length = Number(lengthRaw);
    if (language && language !== "en") controls.language = language;
    if (factuality !== "factual") controls.factuality = factuality;
    return controls;
  }

  async submitCaption(control: ControlWire, isRecaption = false): Promise<void> {
    if (!this.imageId || this.captionBusy) return;
    this.captionBusy = true;
    this.recaptionBtn.disabled = true;
    this.setStatus(isRecaption ? "re-captioning..." : "captioning...");
    try {
      const response = await this.api.caption(this.imageId, {
        control,
        controls: this.styleControls(),
        use_cot: this.useCot.checked,
      });
      this.lastControl = control;
      this.lastCaption = response;
      // a style re-caption keeps the existing mask id and overlay; the
      // selection did not change, so no re-render of the segmentation
      if (!isRecaption) {
        this.maskId = response.mask_id;
        this.maskBits = decodeRle(response.mask);
        this.renderOverlay();
        this.sessionId = null; // new object selected: next chat reseeds
      }
      this.captionOut.textContent = response.refined_caption ?? response.raw_caption;
      this.rawOut.textContent = response.raw_caption;
      this.traceOut.textContent = response.trace.map((s) => s.name).join(" → ");
      this.setStatus(response.fallback_used ? "done (refiner fallback)" : "done");
    } catch (err) {
      this.setStatus(`caption failed: ${(err as Error).message}`);
    } finally {
      this.captionBusy = false;
      this.recaptionBtn.disabled = this.lastControl === null;
    }
  }

  renderOverlay(): void {
    const ctx = context2d(this.overlayCanvas);
    if (!ctx || !this.maskBits || !this.dims) return;
    paintOverlay(ctx, this.maskBits, this.dims.w, this.dims.h);
  }

  clearOverlay(): void {
    this.maskBits = null;
    this.maskId = null;
    const ctx = context2d(this.overlayCanvas);
    if (ctx && this.dims) clearLayer(ctx, this.dims.w, this.dims.h);
  }

  private appendChatLine(cls: string, text: string): HTMLElement {
    const line = this.doc.createElement("div");
    line.className = `chat-line ${cls}`;
    line.textContent = text;
    this.chatLog.appendChild(line);
    return line;
  }

  async sendChat(): Promise<void> {
    const message = this.chatInput.value.trim();
    if (!message || this.chatBusy || !this.imageId) return;
    if (!this.sessionId && !this.lastControl) {
      this.setStatus("select an object before chatting");
      return;
    }
    this.chatBusy = true;
    this.chatInput.disabled = true;
    this.chatSend.disabled = true;
    try {
      const body = this.sessionId
        ? { session_id: this.sessionId, message }
        : { control: this.lastControl as ControlWire, message };
      const response = await this.api.chat(this.imageId, body);
      this.sessionId = response.session_id;
      this.appendChatLine("user", message);
      for (const call of response.tool_calls) {
        this.appendChatLine("tool", `[${call.tool}] ${call.input} → ${call.output}`);
      }
      this.appendChatLine("assistant", response.reply);
      this.chatInput.value = "";
      this.setStatus("chat reply received");
    } catch (err) {
      this.setStatus(`chat failed: ${(err as Error).message}`);
    } finally {
      this.chatBusy = false;
      this.chatInput.disabled = false;
      this.chatSend.disabled = false;
    }
  }

  async requestParagraph(): Promise<void> {
    if (!this.imageId || this.paragraphBusy) return;
    this.paragraphBusy = true;
    this.paragraphBtn.disabled = true;
    try {
      const response = await this.api.paragraph(this.imageId, {});
      this.lastParagraph = response;
      this.paragraphOut.textContent = response.paragraph;
      this.sceneChip.textContent = response.ocr.length
        ? `scene text: ${response.ocr.map((l) => l.text).join(", ")}`
        : "";
      this.sceneChip.hidden = response.ocr.length === 0;
      this.renderRegionList(response);
      this.setStatus(response.cache_hit ? "paragraph (cached masks)" : "paragraph ready");
    } catch (err) {
      this.setStatus(`paragraph failed: ${(err as Error).message}`);
    } finally {
      this.paragraphBusy = false;
      this.paragraphBtn.disabled = false;
    }
  }

  private renderRegionList(response: ParagraphResponse): void {
    this.regionList.textContent = "";
    response.dense.forEach((region, index) => {
      const row = this.doc.createElement("li");
      row.className = "region-row";
      row.textContent = `Region ${index + 1} (${region.area} px): ${region.caption}`;
      row.addEventListener("mouseenter", () => {
        const ctx = context2d(this.highlightCanvas);
        if (ctx && this.dims) {
          clearLayer(ctx, this.dims.w, this.dims.h);
          paintBboxHighlight(ctx, region.bbox);
        }
      });
      row.addEventListener("mouseleave", () => {
        const ctx = context2d(this.highlightCanvas);
        if (ctx && this.dims) clearLayer(ctx, this.dims.w, this.dims.h);
      });
      this.regionList.appendChild(row);
    });
  }
}

export function initApp(doc: Document, api: ApiClient): App {
  return new App(doc, api);
}
