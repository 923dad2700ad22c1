#include <csetjmp>
#include <cstdio>
#include <cstdlib>
#include <cmath>
#include <algorithm>

#include <jpeglib.h>

#include "protego/robustness.hpp"

namespace protego {
namespace {

struct ErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void on_error(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<ErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

}  // namespace

Image jpeg_round_trip(const Image& image, int quality) {
    if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must lie in [1,100]");
    if (image.channels != 1 && image.channels != 3) throw ShapeError("jpeg: expected 1 or 3 channels");

    std::vector<unsigned char> pixels(image.size());
    for (std::size_t i = 0; i < image.size(); ++i)
        pixels[i] = static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));

    unsigned char* buffer = nullptr;
    unsigned long length = 0;
    {
        jpeg_compress_struct cinfo;
        ErrorManager err;
        cinfo.err = jpeg_std_error(&err.base);
        err.base.error_exit = on_error;
        if (setjmp(err.jump)) {
            jpeg_destroy_compress(&cinfo);
            std::free(buffer);
            throw FormatError(std::string("jpeg encode: ") + err.message);
        }
        jpeg_create_compress(&cinfo);
        jpeg_mem_dest(&cinfo, &buffer, &length);
        cinfo.image_width = static_cast<JDIMENSION>(image.cols);
        cinfo.image_height = static_cast<JDIMENSION>(image.rows);
        cinfo.input_components = image.channels;
        cinfo.in_color_space = image.channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
        jpeg_set_defaults(&cinfo);
        cinfo.dct_method = JDCT_ISLOW;
        jpeg_set_quality(&cinfo, quality, TRUE);
        for (int c = 0; c < cinfo.num_components; ++c) {
            cinfo.comp_info[c].h_samp_factor = 1;
            cinfo.comp_info[c].v_samp_factor = 1;
        }
        jpeg_start_compress(&cinfo, TRUE);
        const int stride = image.cols * image.channels;
        while (cinfo.next_scanline < cinfo.image_height) {
            JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.next_scanline) * stride;
            jpeg_write_scanlines(&cinfo, &row, 1);
        }
        jpeg_finish_compress(&cinfo);
        jpeg_destroy_compress(&cinfo);
    }

    Image out(image.rows, image.cols, image.channels);
    {
        jpeg_decompress_struct dinfo;
        ErrorManager err;
        dinfo.err = jpeg_std_error(&err.base);
        err.base.error_exit = on_error;
        if (setjmp(err.jump)) {
            jpeg_destroy_decompress(&dinfo);
            std::free(buffer);
            throw FormatError(std::string("jpeg decode: ") + err.message);
        }
        jpeg_create_decompress(&dinfo);
        jpeg_mem_src(&dinfo, buffer, length);
        jpeg_read_header(&dinfo, TRUE);
        dinfo.dct_method = JDCT_ISLOW;
        dinfo.do_fancy_upsampling = FALSE;
        jpeg_start_decompress(&dinfo);
        std::vector<unsigned char> row(static_cast<std::size_t>(dinfo.output_width) * dinfo.output_components);
        while (dinfo.output_scanline < dinfo.output_height) {
            const int r = static_cast<int>(dinfo.output_scanline);
            JSAMPROW ptr = row.data();
            jpeg_read_scanlines(&dinfo, &ptr, 1);
            for (int c = 0; c < image.cols; ++c)
                for (int k = 0; k < image.channels; ++k)
                    out.at(r, c, k) = row[static_cast<std::size_t>(c) * image.channels + k] / 255.0;
        }
        jpeg_finish_decompress(&dinfo);
        jpeg_destroy_decompress(&dinfo);
    }
    std::free(buffer);
    return out;
}

}  // namespace protego
