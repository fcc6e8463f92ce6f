/** Pure HTML renderers; the app shell owns all event wiring. */

import type { ImageDetail, SearchHit, SearchResponse } from './api';

export function formatDistance(distance: number): string {
  return distance.toFixed(4);
}

function escapeHtml(text: string): string {
  return text
    .replaceAll('&', '&amp;')
    .replaceAll('<', '&lt;')
    .replaceAll('>', '&gt;')
    .replaceAll('"', '&quot;');
}

export function renderResultCard(hit: SearchHit, rank: number): string {
  const caption = hit.best_caption !== undefined
    ? `<p class="caption">${escapeHtml(hit.best_caption)}</p>`
    : '';
  const media = hit.uri !== undefined
    ? `<img class="thumb" src="${escapeHtml(hit.uri)}" alt="${escapeHtml(hit.image_id)}" loading="lazy">`
    : `<div class="thumb placeholder">${escapeHtml(hit.best_caption ?? hit.image_id)}</div>`;
  return `
    <article class="card" data-image-id="${escapeHtml(hit.image_id)}"
             data-best-caption="${escapeHtml(hit.best_caption ?? '')}">
      ${media}
      <div class="meta">
        <span class="rank">#${rank}</span>
        <span class="id">${escapeHtml(hit.image_id)}</span>
        <span class="distance">${formatDistance(hit.distance)}</span>
      </div>
      ${caption}
    </article>`;
}

export function renderGrid(response: SearchResponse): string {
  if (response.results.length === 0) {
    return `<p class="empty">No results for "${escapeHtml(response.query)}".</p>`;
  }
  return response.results.map((hit, i) => renderResultCard(hit, i + 1)).join('\n');
}

export function renderDetail(detail: ImageDetail, bestCaption: string): string {
  const captions = detail.captions
    .map((c) => `<li>${escapeHtml(c)}</li>`)
    .join('');
  const uri = detail.uri
    ? `<p class="uri"><a href="${escapeHtml(detail.uri)}" target="_blank" rel="noreferrer">${escapeHtml(detail.uri)}</a></p>`
    : '';
  const refine = bestCaption
    ? `<button class="refine" data-caption="${escapeHtml(bestCaption)}">Search similar caption</button>`
    : '';
  return `
    <h2>${escapeHtml(detail.image_id)}</h2>
    ${uri}
    <ul class="captions">${captions}</ul>
    ${refine}
    <button class="close">Close</button>`;
}

export function renderDetailNotFound(imageId: string): string {
  return `
    <h2>${escapeHtml(imageId)}</h2>
    <p class="not-found">This image is no longer in the index.</p>
    <button class="close">Close</button>`;
}
