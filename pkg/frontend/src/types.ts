export interface Meta {
  num_gaussians: number;
  classes: string[];
  D: number;
  image_size: [number, number];
}

export interface RenderRequest {
  w2c: number[]; // 16 numbers, row-major world-to-camera
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
  query?: string;
  overlay_alpha?: number;
}

export interface RenderResponse {
  color_png_b64: string;
  label_png_b64: string;
  overlay_png_b64?: string;
  query_class_index?: number;
}

export interface ErrorResponse {
  error: string;
  message: string;
}
