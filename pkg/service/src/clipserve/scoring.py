"""Scorers: map (images, prompt) to a semantic loss and exact pixel gradients.

loss = -(1/B) sum_b cos(embed(image_b), embed(prompt)); the gradient is taken
w.r.t. the raw [0,1] pixels, so any preprocessing (channel normalization) is
part of the scorer and included in the chain rule.
"""

import hashlib

import numpy as np

from .protocol import IMAGE_SIZE, ProtocolError

EMBED_DIM = 512
TOKEN_LIMIT = 77

# channel statistics the pretrained model was trained with
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class FakeScorer:
    """Deterministic offline scorer with the same contract as the real model.

    Images are average-pooled into a 16x16 patch grid and mapped linearly into
    the embedding space, so the loss is smooth and the exact gradient has a
    short closed form. Useful for protocol, determinism and gradient tests.
    """

    name = "fake"
    patch = IMAGE_SIZE // 16

    def __init__(self, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.w = rng.normal(0.0, 1.0, size=(EMBED_DIM, 16 * 16 * 3))
        self._text_cache = {}

    def model_hash(self) -> str:
        return hashlib.sha256(self.w.astype("<f8").tobytes()).hexdigest()

    def embed_text(self, prompt: str) -> np.ndarray:
        tokens = prompt.split()
        if len(tokens) > TOKEN_LIMIT:
            raise ProtocolError(
                f"prompt has {len(tokens)} tokens, limit is {TOKEN_LIMIT}")
        cached = self._text_cache.get(prompt)
        if cached is not None:
            return cached
        seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")
        vec = np.random.default_rng(seed).normal(size=EMBED_DIM)
        vec /= np.linalg.norm(vec)
        self._text_cache[prompt] = vec
        return vec

    def style_grad(self, images: np.ndarray, prompt: str):
        text = self.embed_text(prompt)
        images = np.asarray(images, dtype=np.float64)
        b = images.shape[0]
        k = self.patch
        pooled = images.reshape(b, 16, k, 16, k, 3).mean(axis=(2, 4))
        x = pooled.reshape(b, -1)
        z = x @ self.w.T
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        unit = z / norms
        cos = unit @ text
        loss = float(-np.mean(cos))
        # d(-cos_b)/dz_b = -(text - unit_b cos_b) / |z_b|
        dz = -(text[None, :] - unit * cos[:, None]) / norms / b
        dx = dz @ self.w
        grads = np.repeat(np.repeat(dx.reshape(b, 16, 1, 16, 1, 3), k, axis=2),
                          k, axis=4) / (k * k)
        return loss, grads.reshape(images.shape)


class ClipScorer:
    """Pretrained ViT-B/32 image-text model in eval mode, gradients by autograd."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        import torch
        from transformers import CLIPModel, CLIPTokenizer

        self.torch = torch
        self.name = model_name
        self.model = CLIPModel.from_pretrained(model_name)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = CLIPTokenizer.from_pretrained(model_name)
        self._mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)
        self._text_cache = {}
        self._hash = None

    def model_hash(self) -> str:
        if self._hash is None:
            digest = hashlib.sha256()
            state = self.model.state_dict()
            for key in sorted(state):
                digest.update(key.encode("utf-8"))
                digest.update(state[key].cpu().numpy().tobytes())
            self._hash = digest.hexdigest()
        return self._hash

    def embed_text(self, prompt: str):
        cached = self._text_cache.get(prompt)
        if cached is not None:
            return cached
        torch = self.torch
        ids = self.tokenizer(prompt, return_tensors="pt", truncation=False)
        count = ids["input_ids"].shape[1]
        limit = self.tokenizer.model_max_length
        if count > limit:
            raise ProtocolError(f"prompt has {count} tokens, limit is {limit}")
        with torch.no_grad():
            latent = self.model.get_text_features(**ids)[0]
            latent = latent / latent.norm()
        self._text_cache[prompt] = latent
        return latent

    def style_grad(self, images: np.ndarray, prompt: str):
        torch = self.torch
        text = self.embed_text(prompt)
        pixels = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        pixels.requires_grad_(True)
        chw = pixels.permute(0, 3, 1, 2)
        normalized = (chw - self._mean) / self._std
        latents = self.model.get_image_features(pixel_values=normalized)
        latents = latents / latents.norm(dim=1, keepdim=True)
        loss = -(latents @ text).mean()
        loss.backward()
        return float(loss.item()), pixels.grad.numpy()
